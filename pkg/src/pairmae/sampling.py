"""Positive-pair construction: frame pairing within a video (same-frame,
continuous-gap, or distant interval sampling), per-kind augmentation, and
mixed video/image batch assembly.

Every draw comes from an explicitly passed numpy generator; batches are pure
functions of (manifest, parameters, rng seed), so per-step derived streams
make batch assembly independent of worker layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import ClipRecord, Manifest, decode_frame

SAMPLING_MODES = ("continuous", "distant", "same_frame")


def derive_rng(seed: int, *tags: int) -> np.random.Generator:
    """One experiment seed fans out into independent per-purpose streams."""
    return np.random.default_rng([int(np.uint64(seed)), *[int(t) for t in tags]])


@dataclass(frozen=True)
class SamplingPolicy:
    mode: str = "distant"
    delta: int = 4  # continuous mode: second frame within (i, i+delta]
    n_intervals: int = 2  # distant mode: one frame per interval

    def __post_init__(self):
        if self.mode not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.mode == "continuous" and self.delta < 1:
            raise ValueError("continuous sampling needs delta >= 1")
        if self.mode == "distant" and self.n_intervals < 2:
            raise ValueError("distant sampling needs n_intervals >= 2")


@dataclass(frozen=True)
class SpatialAugment:
    hflip_prob: float = 0.5
    crop_scale: tuple[float, float] = (0.5, 1.0)

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop scale range {self.crop_scale} invalid")


@dataclass(frozen=True)
class ColorAugment:
    enabled: bool = True
    brightness: float = 0.3
    contrast: float = 0.3
    saturation: float = 0.3
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.2)
    include_video: bool = False  # color on video frames is off by default


@dataclass(frozen=True)
class AugmentPolicy:
    spatial: SpatialAugment = field(default_factory=SpatialAugment)
    color: ColorAugment = field(default_factory=ColorAugment)
    out_side: int = 64


def identity_policy(out_side: int = 64) -> AugmentPolicy:
    return AugmentPolicy(
        spatial=SpatialAugment(hflip_prob=0.0, crop_scale=(1.0, 1.0)),
        color=ColorAugment(enabled=False),
        out_side=out_side,
    )


@dataclass(frozen=True)
class BatchPolicies:
    sampling: SamplingPolicy = field(default_factory=SamplingPolicy)
    video_augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    image_augment: AugmentPolicy = field(default_factory=AugmentPolicy)


@dataclass(frozen=True)
class ViewPair:
    view_a: np.ndarray  # [side, side, 3] in [0, 1]
    view_b: np.ndarray
    source_id: str
    source_kind: str  # "video" | "image"
    frame_indices: tuple[int, int] | None = None


def sample_continuous(
    record: ClipRecord, delta: int, rng: np.random.Generator
) -> tuple[int, int]:
    """First frame uniform, second uniform within (i, i + delta]."""
    t = record.num_frames
    if record.kind != "video":
        raise ValueError(f"record {record.id!r} is not a video")
    if t <= delta:
        raise ValueError(
            f"record {record.id!r} has {t} frames, too short for delta {delta}"
        )
    i = int(rng.integers(0, t - delta))
    j = i + int(rng.integers(1, delta + 1))
    return i, j


def sample_distant(
    record: ClipRecord, n: int, rng: np.random.Generator
) -> list[int]:
    """One frame from each of n equal non-overlapping intervals of [0, T)."""
    t = record.num_frames
    if record.kind != "video":
        raise ValueError(f"record {record.id!r} is not a video")
    if t < n:
        raise ValueError(f"record {record.id!r} has {t} frames, fewer than {n} intervals")
    edges = [math.floor(k * t / n) for k in range(n + 1)]
    return [int(rng.integers(edges[k], edges[k + 1])) for k in range(n)]


def sample_pair(
    record: ClipRecord, policy: SamplingPolicy, rng: np.random.Generator
) -> tuple[int, int]:
    if policy.mode == "same_frame":
        i = int(rng.integers(0, record.num_frames))
        return i, i
    if policy.mode == "continuous":
        return sample_continuous(record, policy.delta, rng)
    i, j = sample_distant(record, policy.n_intervals, rng)[:2]
    return i, j


def bilinear_resize(img: np.ndarray, out_side: int) -> np.ndarray:
    """Resize HxWxC float array with align-corners-false bilinear sampling."""
    h, w = img.shape[:2]
    if (h, w) == (out_side, out_side):
        return img.copy()

    def axis_coords(n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        centers = (np.arange(out_side) + 0.5) * (n_in / out_side) - 0.5
        centers = np.clip(centers, 0.0, n_in - 1.0)
        lo = np.floor(centers).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (centers - lo).astype(np.float32)

    r0, r1, fr = axis_coords(h)
    c0, c1, fc = axis_coords(w)
    top = img[r0][:, c0] * (1 - fc)[None, :, None] + img[r0][:, c1] * fc[None, :, None]
    bot = img[r1][:, c0] * (1 - fc)[None, :, None] + img[r1][:, c1] * fc[None, :, None]
    return top * (1 - fr)[:, None, None] + bot * fr[:, None, None]


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(2.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float32)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(img, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for k, wgt in enumerate(kernel):
        out += wgt * padded[k : k + img.shape[0]]
    padded = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for k, wgt in enumerate(kernel):
        out += wgt * padded[:, k : k + img.shape[1]]
    return out


def _random_crop(
    img: np.ndarray, spatial: SpatialAugment, out_side: int, rng: np.random.Generator
) -> np.ndarray:
    h, w = img.shape[:2]
    lo, hi = spatial.crop_scale
    side = 0
    # A crop that rounds to zero pixels is redrawn; after 10 tries fall back
    # to a center crop at the mean scale.
    for _ in range(10):
        scale = rng.uniform(lo, hi)
        side = int(round(min(h, w) * math.sqrt(scale)))
        if side >= 1:
            r0 = int(rng.integers(0, h - side + 1))
            c0 = int(rng.integers(0, w - side + 1))
            return bilinear_resize(img[r0 : r0 + side, c0 : c0 + side], out_side)
    side = max(1, int(round(min(h, w) * math.sqrt((lo + hi) / 2))))
    r0, c0 = (h - side) // 2, (w - side) // 2
    return bilinear_resize(img[r0 : r0 + side, c0 : c0 + side], out_side)


def _color_jitter(
    img: np.ndarray, color: ColorAugment, rng: np.random.Generator
) -> np.ndarray:
    out = img
    if color.brightness > 0:
        out = out + rng.uniform(-color.brightness, color.brightness)
    if color.contrast > 0:
        factor = rng.uniform(1.0 - color.contrast, 1.0 + color.contrast)
        out = (out - out.mean()) * factor + out.mean()
    if color.saturation > 0:
        factor = rng.uniform(1.0 - color.saturation, 1.0 + color.saturation)
        grey = out.mean(axis=2, keepdims=True)
        out = grey + (out - grey) * factor
    if color.blur_prob > 0 and rng.random() < color.blur_prob:
        sigma = rng.uniform(*color.blur_sigma)
        out = _gaussian_blur(out, sigma)
    return out


def augment(
    view: np.ndarray, policy: AugmentPolicy, kind: str, rng: np.random.Generator
) -> np.ndarray:
    """Spatial augmentation for every view; color distortion for images (and
    for video frames only when the policy opts in). Output is clipped to
    [0, 1] at the configured resolution."""
    out = _random_crop(view, policy.spatial, policy.out_side, rng)
    if policy.spatial.hflip_prob > 0 and rng.random() < policy.spatial.hflip_prob:
        out = out[:, ::-1]
    if policy.color.enabled and (kind == "image" or policy.color.include_video):
        out = _color_jitter(out, policy.color, rng)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=np.float32)


def _choose_records(
    records: list[ClipRecord], count: int, rng: np.random.Generator
) -> list[ClipRecord]:
    """Without replacement when the pool allows, otherwise with."""
    if count == 0:
        return []
    replace = count > len(records)
    idx = rng.choice(len(records), size=count, replace=replace)
    return [records[int(i)] for i in idx]


def build_batch(
    manifest: Manifest,
    batch_size: int,
    image_ratio: float,
    policies: BatchPolicies,
    rng: np.random.Generator,
) -> list[ViewPair]:
    """Assemble floor(N * image_ratio) augmented-image pairs and fill the
    rest with video frame pairs."""
    if not manifest.records:
        raise ValueError("manifest is empty")
    if not 0.0 <= image_ratio <= 1.0:
        raise ValueError(f"image_ratio {image_ratio} outside [0, 1]")
    n_images = int(math.floor(batch_size * image_ratio))
    n_videos = batch_size - n_images
    videos = manifest.by_kind("video")
    images = manifest.by_kind("image")
    if n_videos > 0 and not videos:
        raise ValueError("batch requires video records but manifest has none")
    if n_images > 0 and not images:
        raise ValueError("batch requires image records but manifest has none")

    pairs: list[ViewPair] = []
    for rec in _choose_records(videos, n_videos, rng):
        i, j = sample_pair(rec, policies.sampling, rng)
        frame_i = decode_frame(manifest.frame_path(rec, i))
        frame_j = frame_i if j == i else decode_frame(manifest.frame_path(rec, j))
        pairs.append(
            ViewPair(
                view_a=augment(frame_i, policies.video_augment, "video", rng),
                view_b=augment(frame_j, policies.video_augment, "video", rng),
                source_id=rec.id,
                source_kind="video",
                frame_indices=(i, j),
            )
        )
    for rec in _choose_records(images, n_images, rng):
        frame = decode_frame(manifest.frame_path(rec, 0))
        pairs.append(
            ViewPair(
                view_a=augment(frame, policies.image_augment, "image", rng),
                view_b=augment(frame, policies.image_augment, "image", rng),
                source_id=rec.id,
                source_kind="image",
                frame_indices=None,
            )
        )
    return pairs
