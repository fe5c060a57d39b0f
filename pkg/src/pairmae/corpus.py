"""Dataset manifests, the deterministic synthetic corpus, and frame decoding.

A corpus is a directory of lossless PNG frames plus a JSON manifest. Videos
show a textured shape translating in one of the configured motion directions;
the class label is the direction. Single images show the same shape at rest,
labelled by the direction its leading-edge cue points. Identical seeds produce
byte-identical corpora.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

MOTION_DIRECTIONS = {
    "left": (0, -1),
    "right": (0, 1),
    "up": (-1, 0),
    "down": (1, 0),
}


class ManifestError(ValueError):
    """A manifest violates its invariants (duplicate id, missing frame, ...)."""


@dataclass(frozen=True)
class ClipRecord:
    """One video (ordered frame list) or one image (single frame)."""

    id: str
    kind: str  # "video" | "image"
    frame_paths: tuple[str, ...]  # relative to the manifest location
    label: int | None
    height: int
    width: int

    def __post_init__(self):
        if self.kind not in ("video", "image"):
            raise ManifestError(f"record {self.id!r}: unknown kind {self.kind!r}")
        if self.kind == "image" and len(self.frame_paths) != 1:
            raise ManifestError(
                f"record {self.id!r}: image records need exactly one frame, "
                f"got {len(self.frame_paths)}"
            )
        if len(self.frame_paths) < 1:
            raise ManifestError(f"record {self.id!r}: empty frame list")

    @property
    def num_frames(self) -> int:
        return len(self.frame_paths)


@dataclass(frozen=True)
class Manifest:
    records: tuple[ClipRecord, ...]
    num_classes: int
    split: str  # "train" | "val" | "test"
    root: Path  # directory frame paths are relative to

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise ManifestError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)
            if rec.label is not None and not (0 <= rec.label < self.num_classes):
                raise ManifestError(
                    f"record {rec.id!r}: label {rec.label} outside "
                    f"[0, {self.num_classes})"
                )
        if self.split not in ("train", "val", "test"):
            raise ManifestError(f"unknown split {self.split!r}")

    def frame_path(self, rec: ClipRecord, t: int) -> Path:
        return self.root / rec.frame_paths[t]

    def by_kind(self, kind: str) -> list[ClipRecord]:
        return [r for r in self.records if r.kind == kind]


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic moving-shape corpus.

    The shape carries a small leading-edge cue pointing along its motion
    direction so single frames stay weakly class-informative; cue_scale
    controls how visible that cue is (0 removes it).
    """

    num_videos: int = 32
    num_images: int = 32
    frames_per_video: int = 16
    canvas: int = 64
    motion_classes: tuple[str, ...] = ("left", "right", "up", "down")
    seed: int = 0
    patch_side: int = 8  # canvas must tile into patches of this size
    shape_side: int = 12
    speed: float = 2.5  # pixels per frame
    noise_amp: float = 0.22
    cue_scale: float = 1.0

    def __post_init__(self):
        if self.frames_per_video < 2:
            raise ValueError("frames_per_video must be >= 2")
        if self.canvas % self.patch_side != 0:
            raise ValueError(
                f"canvas {self.canvas} not divisible by patch side {self.patch_side}"
            )
        for name in self.motion_classes:
            if name not in MOTION_DIRECTIONS:
                raise ValueError(f"unknown motion class {name!r}")
        margin = self.shape_side // 2 + max(2, int(round(self.shape_side * 0.4))) + 1
        travel = self.speed * (self.frames_per_video - 1)
        if travel > self.canvas - 2 * margin:
            raise ValueError(
                f"trajectory of {travel:.1f}px does not fit the canvas; reduce "
                "speed, frames_per_video, or shape_side"
            )


def _render_background(rng: np.random.Generator, canvas: int, amp: float) -> np.ndarray:
    """Blocky per-record noise texture, 4x4-pixel cells, base grey 0.35."""
    cells = canvas // 4
    field = rng.uniform(-amp, amp, size=(cells, cells, 3)).astype(np.float32)
    bg = 0.35 + np.kron(field, np.ones((4, 4, 1), dtype=np.float32))
    return np.clip(bg, 0.0, 1.0)


def _paint_square(img: np.ndarray, cy: float, cx: float, side: int, color) -> None:
    h, w = img.shape[:2]
    half = side // 2
    r0, r1 = int(round(cy)) - half, int(round(cy)) - half + side
    c0, c1 = int(round(cx)) - half, int(round(cx)) - half + side
    r0, r1 = max(r0, 0), min(r1, h)
    c0, c1 = max(c0, 0), min(c1, w)
    if r0 < r1 and c0 < c1:
        img[r0:r1, c0:c1] = color


def _render_frame(
    bg: np.ndarray,
    cy: float,
    cx: float,
    direction: tuple[int, int],
    color: np.ndarray,
    shape_side: int,
    cue_scale: float,
) -> np.ndarray:
    img = bg.copy()
    _paint_square(img, cy, cx, shape_side, color)
    if cue_scale > 0:
        # Leading-edge cue: a dimmer square protruding along the motion axis.
        cue_side = max(2, int(round(shape_side * 0.4 * cue_scale)))
        dy, dx = direction
        off = shape_side // 2 + cue_side // 2
        _paint_square(img, cy + dy * off, cx + dx * off, cue_side, color * 0.55)
    return np.clip(img, 0.0, 1.0)


def _write_png(path: Path, img: np.ndarray) -> None:
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _trajectory_start(
    rng: np.random.Generator, spec: SynthSpec, direction: tuple[int, int]
) -> tuple[float, float]:
    """Start position keeping shape + cue inside the canvas for all frames."""
    margin = spec.shape_side // 2 + max(2, int(round(spec.shape_side * 0.4))) + 1
    lo, hi = margin, spec.canvas - margin
    travel = spec.speed * (spec.frames_per_video - 1)
    dy, dx = direction

    def axis_start(d: float) -> float:
        if d > 0:
            return rng.uniform(lo, hi - travel)
        if d < 0:
            return rng.uniform(lo + travel, hi)
        return rng.uniform(lo, hi)

    return axis_start(dy), axis_start(dx)


def generate_synthetic(spec: SynthSpec, out_dir: str | Path) -> Manifest:
    """Write the synthetic corpus under out_dir and return its manifest.

    Output is byte-identical for identical specs: one rng stream drives every
    draw in a fixed order, and PNG/JSON encoding carries no timestamps.
    """
    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    try:
        frames_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out_dir}: {exc}") from exc

    rng = np.random.default_rng(np.uint64(spec.seed))
    records: list[ClipRecord] = []
    n_classes = len(spec.motion_classes)

    for v in range(spec.num_videos):
        label = int(rng.integers(0, n_classes))
        direction = MOTION_DIRECTIONS[spec.motion_classes[label]]
        bg = _render_background(rng, spec.canvas, spec.noise_amp)
        color = rng.uniform(0.75, 0.98, size=3).astype(np.float32)
        cy, cx = _trajectory_start(rng, spec, direction)
        rec_id = f"video_{v:04d}"
        rec_dir = frames_dir / rec_id
        rec_dir.mkdir(exist_ok=True)
        paths = []
        for t in range(spec.frames_per_video):
            img = _render_frame(
                bg,
                cy + direction[0] * spec.speed * t,
                cx + direction[1] * spec.speed * t,
                direction,
                color,
                spec.shape_side,
                spec.cue_scale,
            )
            rel = f"frames/{rec_id}/f{t:03d}.png"
            _write_png(out_dir / rel, img)
            paths.append(rel)
        records.append(
            ClipRecord(rec_id, "video", tuple(paths), label, spec.canvas, spec.canvas)
        )

    for i in range(spec.num_images):
        label = int(rng.integers(0, n_classes))
        direction = MOTION_DIRECTIONS[spec.motion_classes[label]]
        bg = _render_background(rng, spec.canvas, spec.noise_amp)
        color = rng.uniform(0.75, 0.98, size=3).astype(np.float32)
        margin = spec.shape_side // 2 + max(2, int(round(spec.shape_side * 0.4))) + 1
        cy = rng.uniform(margin, spec.canvas - margin)
        cx = rng.uniform(margin, spec.canvas - margin)
        rec_id = f"image_{i:04d}"
        rec_dir = frames_dir / rec_id
        rec_dir.mkdir(exist_ok=True)
        img = _render_frame(
            bg, cy, cx, direction, color, spec.shape_side, spec.cue_scale
        )
        rel = f"frames/{rec_id}/f000.png"
        _write_png(out_dir / rel, img)
        records.append(
            ClipRecord(rec_id, "image", (rel,), label, spec.canvas, spec.canvas)
        )

    manifest = Manifest(tuple(records), n_classes, "train", out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def save_manifest(manifest: Manifest, path: str | Path) -> Path:
    path = Path(path)
    doc = {
        "records": [
            {
                "id": r.id,
                "kind": r.kind,
                "frames": list(r.frame_paths),
                "label": r.label,
                "height": r.height,
                "width": r.width,
            }
            for r in manifest.records
        ],
        "num_classes": manifest.num_classes,
        "split": manifest.split,
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def load_manifest(path: str | Path) -> Manifest:
    """Parse and fully validate a manifest; fails closed on any violation."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"cannot parse manifest {path}: {exc}") from exc

    for key in ("records", "num_classes", "split"):
        if key not in doc:
            raise ManifestError(f"manifest {path} missing key {key!r}")

    root = path.parent
    records = []
    for entry in doc["records"]:
        rec = ClipRecord(
            id=str(entry["id"]),
            kind=str(entry["kind"]),
            frame_paths=tuple(str(p) for p in entry["frames"]),
            label=None if entry.get("label") is None else int(entry["label"]),
            height=int(entry["height"]),
            width=int(entry["width"]),
        )
        for rel in rec.frame_paths:
            fpath = root / rel
            if not fpath.is_file():
                raise ManifestError(
                    f"record {rec.id!r}: missing frame file {fpath}"
                )
            with Image.open(fpath) as im:
                w, h = im.size
            if (h, w) != (rec.height, rec.width):
                raise ManifestError(
                    f"record {rec.id!r}: frame {fpath} is {h}x{w}, "
                    f"manifest says {rec.height}x{rec.width}"
                )
        records.append(rec)

    return Manifest(tuple(records), int(doc["num_classes"]), str(doc["split"]), root)


def decode_frame(path: str | Path) -> np.ndarray:
    """Decode one frame to float32 HxWx3 in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, SyntaxError) as exc:
        raise ManifestError(f"cannot decode frame {path}: {exc}") from exc
    return arr / 255.0


def load_frames(manifest: Manifest, rec: ClipRecord) -> np.ndarray:
    """Decode all frames of a record, stacked [T, H, W, 3]."""
    return np.stack([decode_frame(manifest.frame_path(rec, t)) for t in range(rec.num_frames)])


def pack_directory(
    src: str | Path,
    out_path: str | Path,
    split: str = "train",
    labels: dict[str, int] | None = None,
    num_classes: int | None = None,
) -> Manifest:
    """Build a manifest from a directory tree: one subdirectory per record,
    frames sorted by filename. Records with a single frame become images.
    """
    src = Path(src)
    out_path = Path(out_path)
    if not src.is_dir():
        raise ManifestError(f"source directory not found: {src}")

    root = out_path.parent
    records = []
    for rec_dir in sorted(p for p in src.iterdir() if p.is_dir()):
        frames = sorted(
            p for p in rec_dir.iterdir() if p.suffix.lower() in (".png", ".bmp")
        )
        if not frames:
            continue
        sizes = set()
        rels = []
        for f in frames:
            with Image.open(f) as im:
                sizes.add(im.size)
            rels.append(str(f.relative_to(root)))
        if len(sizes) != 1:
            raise ManifestError(f"record {rec_dir.name!r}: mixed frame sizes {sizes}")
        (w, h) = sizes.pop()
        label = labels.get(rec_dir.name) if labels else None
        kind = "video" if len(frames) > 1 else "image"
        records.append(ClipRecord(rec_dir.name, kind, tuple(rels), label, h, w))

    if not records:
        raise ManifestError(f"no records found under {src}")
    if num_classes is None:
        present = [r.label for r in records if r.label is not None]
        num_classes = max(present) + 1 if present else 1
    manifest = Manifest(tuple(records), num_classes, split, root)
    save_manifest(manifest, out_path)
    return manifest


def describe(manifest: Manifest) -> dict:
    return {
        "records": len(manifest.records),
        "videos": len(manifest.by_kind("video")),
        "images": len(manifest.by_kind("image")),
        "num_classes": manifest.num_classes,
        "split": manifest.split,
    }
