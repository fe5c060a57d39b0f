"""Downstream measurement: linear probing on frozen features, end-to-end
finetuning with layer-wise lr decay, semi-supervised fractions, multi-view
video evaluation, and the temporal shuffle/repeat probe.

Evaluations are pure functions of (checkpoint, manifest, seed); every result
can be serialized as JSON alongside a hash of the checkpoint it came from.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import network, patches, sampling, trainer
from .corpus import ClipRecord, Manifest, decode_frame
from .network import PairModel, VideoModel, inflate_to_video
from .sampling import AugmentPolicy, ColorAugment, SpatialAugment, derive_rng


@dataclass(frozen=True)
class ProbeSpec:
    """Frozen-encoder linear evaluation: momentum SGD over a
    batch-normalized (no affine) linear head, cosine schedule."""

    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 20
    warmup_epochs: int = 2
    batch_size: int = 64
    crop_scale: tuple[float, float] = (0.6, 1.0)
    use_cls: bool = False  # pooled tokens by default; class-token probing via flag
    seed: int = 0

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be < epochs")


@dataclass(frozen=True)
class FinetuneSpec:
    base_lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.05
    layer_decay: float = 0.65
    label_smoothing: float = 0.1
    mixup_alpha: float = 0.8
    drop_path: float = 0.1
    epochs: int = 8
    warmup_epochs: int = 1
    batch_size: int = 64
    crop_scale: tuple[float, float] = (0.6, 1.0)
    # Off by default: flips invert orientation-defined labels on the
    # synthetic motion task.
    hflip_prob: float = 0.0
    use_mixup: bool = True
    use_cls: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.layer_decay <= 1.0:
            raise ValueError("layer_decay must lie in (0, 1]")
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be < epochs")


@dataclass(frozen=True)
class EvalResult:
    top1: float
    top5: float
    n_examples: int
    condition: str

    def __post_init__(self):
        if not 0.0 <= self.top1 <= self.top5 <= 100.0:
            raise ValueError(
                f"accuracy ordering violated: top1={self.top1}, top5={self.top5}"
            )


def write_result(
    result: EvalResult, path: str | Path, seed: int, checkpoint: str | Path
) -> Path:
    path = Path(path)
    doc = {
        "condition": result.condition,
        "top1": result.top1,
        "top5": result.top5,
        "n": result.n_examples,
        "seed": int(seed),
        "checkpoint_hash": hashlib.sha256(Path(checkpoint).read_bytes()).hexdigest(),
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------


def labelled_examples(manifest: Manifest) -> list[tuple[ClipRecord, int]]:
    """One deterministic probe frame per labelled record: the middle frame of
    a video, the sole frame of an image."""
    out = []
    for rec in manifest.records:
        if rec.label is None:
            continue
        out.append((rec, rec.num_frames // 2))
    if not out:
        raise ValueError("manifest has no labelled records")
    return out


def _load_example_frames(manifest: Manifest, examples, side: int) -> np.ndarray:
    frames = []
    for rec, t in examples:
        img = decode_frame(manifest.frame_path(rec, t))
        frames.append(sampling.bilinear_resize(img, side).astype(np.float32))
    return np.stack(frames)


def _augment_batch(
    frames: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator
) -> torch.Tensor:
    views = [sampling.augment(f, policy, "image", rng) for f in frames]
    return torch.from_numpy(np.stack(views))


def encode_images(model: PairModel, images: torch.Tensor, use_cls: bool) -> torch.Tensor:
    """Full-token (unmasked) features of [N, H, W, 3] images."""
    tokens = patches.patchify(images, model.cfg.patch)
    feats = model.encoder(tokens, None)
    if use_cls:
        return model.cls_feature(feats)
    return model.pool(feats)


def _topk_percent(logits: torch.Tensor, labels: torch.Tensor) -> tuple[float, float]:
    n, c = logits.shape
    k = min(5, c)
    top = logits.topk(k, dim=1).indices
    hit1 = (top[:, 0] == labels).float().mean().item()
    hitk = (top == labels.unsqueeze(1)).any(dim=1).float().mean().item()
    return 100.0 * hit1, 100.0 * hitk


def _init_linear(layer: nn.Linear, rng: np.random.Generator) -> None:
    fan_in = layer.weight.shape[1]
    limit = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        layer.weight.copy_(torch.from_numpy(
            rng.uniform(-limit, limit, size=tuple(layer.weight.shape)).astype(np.float32)
        ))
        layer.bias.zero_()


class _SGD:
    """Momentum SGD over named parameters, hand-rolled for determinism."""

    def __init__(self, named_params, lr_fn, momentum: float, weight_decay: float):
        self.params = list(named_params)
        self.lr_fn = lr_fn
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = {n: torch.zeros_like(p) for n, p in self.params}

    @torch.no_grad()
    def step(self, progress: float) -> None:
        lr = self.lr_fn(progress)
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay > 0:
                g = g + self.weight_decay * p
            buf = self.buf[name]
            buf.mul_(self.momentum).add_(g)
            p.add_(buf, alpha=-lr)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def _cosine_lr(base: float, warmup: int, total: int):
    def lr_at(progress: float) -> float:
        warm = warmup / total
        if progress < warm:
            return base * progress / warm
        return base * 0.5 * (1.0 + math.cos(math.pi * (progress - warm) / (1.0 - warm)))

    return lr_at


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------


def linear_probe(
    checkpoint: str | Path,
    train_manifest: Manifest,
    val_manifest: Manifest,
    spec: ProbeSpec,
) -> EvalResult:
    """Train only normalization + a linear classifier on frozen features."""
    torch.set_num_threads(1)
    model, _ = network.load_checkpoint(checkpoint)
    return probe_model(model, train_manifest, val_manifest, spec)


def probe_model(
    model: PairModel,
    train_manifest: Manifest,
    val_manifest: Manifest,
    spec: ProbeSpec,
) -> EvalResult:
    model.eval()
    if train_manifest.num_classes != val_manifest.num_classes:
        raise ValueError(
            f"class count mismatch: train {train_manifest.num_classes} "
            f"vs val {val_manifest.num_classes}"
        )
    side = model.cfg.patch.image_side
    train_examples = labelled_examples(train_manifest)
    val_examples = labelled_examples(val_manifest)
    train_frames = _load_example_frames(train_manifest, train_examples, side)
    val_frames = _load_example_frames(val_manifest, val_examples, side)
    train_labels = torch.tensor([r.label for r, _ in train_examples])
    val_labels = torch.tensor([r.label for r, _ in val_examples])

    with torch.no_grad():
        val_feats = encode_images(model, torch.from_numpy(val_frames), spec.use_cls)

    dim = val_feats.shape[1]
    head = nn.Sequential(
        nn.BatchNorm1d(dim, affine=False),
        nn.Linear(dim, train_manifest.num_classes),
    )
    _init_linear(head[1], derive_rng(spec.seed, 101))
    opt = _SGD(
        list(head.named_parameters()),
        _cosine_lr(
            spec.base_lr * spec.batch_size / 256, spec.warmup_epochs, spec.epochs
        ),
        spec.momentum,
        spec.weight_decay,
    )

    aug_policy = AugmentPolicy(
        spatial=SpatialAugment(hflip_prob=0.0, crop_scale=spec.crop_scale),
        color=ColorAugment(enabled=False),
        out_side=side,
    )
    n = len(train_examples)
    total_steps = spec.epochs * max(1, n // spec.batch_size)
    step = 0
    for epoch in range(spec.epochs):
        rng = derive_rng(spec.seed, 102, epoch)
        views = _augment_batch(train_frames, aug_policy, rng)
        with torch.no_grad():
            feats = encode_images(model, views, spec.use_cls)
        order = rng.permutation(n)
        head.train()
        for start in range(0, n, spec.batch_size):
            idx = torch.from_numpy(order[start : start + spec.batch_size])
            if idx.shape[0] < 2:
                continue  # batch stats need >= 2 rows
            logits = head(feats[idx])
            loss = F.cross_entropy(logits, train_labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(step / max(1, total_steps))
            step += 1

    head.eval()
    with torch.no_grad():
        top1, top5 = _topk_percent(head(val_feats), val_labels)
    return EvalResult(top1, top5, len(val_examples), "probe")


# ---------------------------------------------------------------------------
# End-to-end finetuning
# ---------------------------------------------------------------------------


class ImageClassifier(nn.Module):
    def __init__(self, model: PairModel, num_classes: int, use_cls: bool):
        super().__init__()
        self.backbone = model
        self.use_cls = use_cls and model.cfg.use_cls_token
        self.head = nn.Linear(model.cfg.enc_width, num_classes)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(encode_images(self.backbone, images, self.use_cls))


def layer_lr_scales(
    named_params, depth: int, decay: float, prefix: str = "backbone.encoder."
) -> dict[str, float]:
    """Geometric lr decay from the head toward the stem: the classifier and
    final norm sit at the base lr, block j (bottom-up) at decay^(depth - j),
    and the patch embedding / class token at decay^depth."""
    scales = {}
    for name, _ in named_params:
        if name.startswith(f"{prefix}blocks."):
            block = int(name[len(prefix) + len("blocks.") :].split(".")[0])
            level = depth - block
        elif name.startswith((f"{prefix}patch_embed", f"{prefix}cls_token")) or (
            "tokenizer." in name
        ):
            level = depth
        else:  # classifier head, final norm, projection leftovers
            level = 0
        scales[name] = decay**level
    return scales


def _smoothed_mixup_loss(
    logits: torch.Tensor,
    labels_a: torch.Tensor,
    labels_b: torch.Tensor,
    lam: float,
    smoothing: float,
) -> torch.Tensor:
    loss_a = F.cross_entropy(logits, labels_a, label_smoothing=smoothing)
    loss_b = F.cross_entropy(logits, labels_b, label_smoothing=smoothing)
    return lam * loss_a + (1.0 - lam) * loss_b


def finetune(
    checkpoint: str | Path,
    train_manifest: Manifest,
    val_manifest: Manifest,
    spec: FinetuneSpec,
) -> EvalResult:
    """Unfreeze everything with layer-wise lr decay, label smoothing and
    (optionally) mixup; report val accuracy."""
    torch.set_num_threads(1)
    model, _ = network.load_checkpoint(checkpoint)
    clf = ImageClassifier(model, train_manifest.num_classes, spec.use_cls)
    _init_linear(clf.head, derive_rng(spec.seed, 201))
    result, _ = _finetune_classifier(
        clf, train_manifest, val_manifest, spec, condition="finetune"
    )
    return result


def _finetune_classifier(
    clf: nn.Module,
    train_manifest: Manifest,
    val_manifest: Manifest,
    spec: FinetuneSpec,
    condition: str,
    video_frames: int | None = None,
) -> tuple[EvalResult, nn.Module]:
    if train_manifest.num_classes != val_manifest.num_classes:
        raise ValueError(
            f"class count mismatch: train {train_manifest.num_classes} "
            f"vs val {val_manifest.num_classes}"
        )
    is_video = video_frames is not None
    backbone = clf.backbone
    depth = backbone.cfg.enc_depth

    named = list(clf.named_parameters())
    scales = layer_lr_scales(
        named,
        depth,
        spec.layer_decay,
        prefix="backbone.encoder." if not is_video else "backbone.",
    )
    optim_spec = trainer.OptimSpec(
        base_lr=spec.base_lr,
        betas=spec.betas,
        weight_decay=spec.weight_decay,
        batch_size=spec.batch_size,
        warmup_epochs=spec.warmup_epochs,
        total_epochs=spec.epochs,
    )
    opt = trainer.AdamW(named, optim_spec, lr_scales=scales)

    side = backbone.cfg.patch.image_side
    if is_video:
        examples = [(r, 0) for r in train_manifest.records if r.label is not None]
        val_examples = [(r, 0) for r in val_manifest.records if r.label is not None]
        if not examples or not val_examples:
            raise ValueError("video finetune needs labelled video records")
    else:
        examples = labelled_examples(train_manifest)
        val_examples = labelled_examples(val_manifest)
        train_frames = _load_example_frames(train_manifest, examples, side)
        val_frames = _load_example_frames(val_manifest, val_examples, side)
    labels = torch.tensor([r.label for r, _ in examples])
    val_labels = torch.tensor([r.label for r, _ in val_examples])

    aug_policy = AugmentPolicy(
        spatial=SpatialAugment(hflip_prob=spec.hflip_prob, crop_scale=spec.crop_scale),
        color=ColorAugment(enabled=False),
        out_side=side,
    )

    depth_ctl = backbone.encoder.depth_ctl if not is_video else backbone.depth_ctl
    n = len(examples)
    steps_per_epoch = max(1, n // spec.batch_size)
    total_steps = spec.epochs * steps_per_epoch
    step = 0
    for epoch in range(spec.epochs):
        rng = derive_rng(spec.seed, 202, epoch)
        order = rng.permutation(n)
        clf.train()
        for start in range(0, n, spec.batch_size):
            idx = order[start : start + spec.batch_size]
            if idx.shape[0] < 2:
                continue
            if is_video:
                batch = _load_clip_batch(
                    train_manifest, [examples[i][0] for i in idx], video_frames,
                    side, rng, jitter=True,
                )
            else:
                batch = _augment_batch(train_frames[idx], aug_policy, rng)
            batch_labels = labels[torch.from_numpy(idx)]

            depth_ctl.p = spec.drop_path
            depth_ctl.rng = rng
            if spec.use_mixup:
                lam = float(rng.beta(spec.mixup_alpha, spec.mixup_alpha))
                perm = torch.from_numpy(rng.permutation(batch.shape[0]))
                mixed = lam * batch + (1.0 - lam) * batch[perm]
                logits = clf(mixed)
                loss = _smoothed_mixup_loss(
                    logits, batch_labels, batch_labels[perm], lam, spec.label_smoothing
                )
            else:
                logits = clf(batch)
                loss = F.cross_entropy(
                    logits, batch_labels, label_smoothing=spec.label_smoothing
                )
            depth_ctl.p = 0.0
            depth_ctl.rng = None

            opt.zero_grad()
            loss.backward()
            opt.step(trainer.effective_lr(optim_spec, step / total_steps))
            step += 1

    clf.eval()
    with torch.no_grad():
        if is_video:
            preds = _load_clip_batch(
                val_manifest, [r for r, _ in val_examples], video_frames,
                side, derive_rng(spec.seed, 203), jitter=False,
            )
            logits = clf(preds)
        else:
            logits = clf(torch.from_numpy(val_frames))
    top1, top5 = _topk_percent(logits, val_labels)
    return EvalResult(top1, top5, len(val_examples), condition), clf


def stratified_subset(
    manifest: Manifest, fraction: float, rng: np.random.Generator
) -> Manifest:
    """Per-class subsample; errors when a class would lose every example."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside (0, 1]")
    by_label: dict[int, list[ClipRecord]] = {}
    for rec in manifest.records:
        if rec.label is not None:
            by_label.setdefault(rec.label, []).append(rec)
    keep: list[ClipRecord] = []
    for label in sorted(by_label):
        group = by_label[label]
        k = int(round(fraction * len(group)))
        if k < 1:
            raise ValueError(
                f"fraction {fraction} yields no examples for class {label}"
            )
        idx = rng.choice(len(group), size=k, replace=False)
        keep.extend(group[int(i)] for i in sorted(idx))
    return Manifest(tuple(keep), manifest.num_classes, manifest.split, manifest.root)


DEFAULT_FRACTIONS = (0.05, 0.10, 0.25, 0.50, 0.75, 1.00)


def semi_supervised_sweep(
    checkpoint: str | Path,
    train_manifest: Manifest,
    val_manifest: Manifest,
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS,
    spec: FinetuneSpec = FinetuneSpec(),
) -> list[EvalResult]:
    """One finetune per label fraction, with mixup and the stronger crop
    augmentation disabled."""
    weak_spec = dataclasses.replace(spec, use_mixup=False, crop_scale=(0.9, 1.0))
    results = []
    for fraction in fractions:
        subset = stratified_subset(
            train_manifest, fraction, derive_rng(spec.seed, 301, int(fraction * 10000))
        )
        result = finetune(checkpoint, subset, val_manifest, weak_spec)
        results.append(
            dataclasses.replace(result, condition=f"semi@{fraction:.2f}")
        )
    return results


# ---------------------------------------------------------------------------
# Video evaluation
# ---------------------------------------------------------------------------


class VideoClassifier(nn.Module):
    def __init__(self, video: VideoModel, num_classes: int, use_cls: bool):
        super().__init__()
        self.backbone = video
        self.use_cls = use_cls and video.cfg.use_cls_token
        self.head = nn.Linear(video.cfg.enc_width, num_classes)

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        """clips: [N, T, H, W, 3] -> logits."""
        n, t = clips.shape[:2]
        tokens = torch.stack(
            [patches.patchify(clips[:, k], self.backbone.cfg.patch) for k in range(t)],
            dim=1,
        )
        feats = self.backbone(tokens)
        pooled = (
            feats[:, 0] if self.use_cls else self.backbone.pool(feats)
        )
        return self.head(pooled)


def clip_indices(num_frames: int, clip_len: int, start: int) -> list[int]:
    stride = max(1, num_frames // clip_len)
    span = stride * (clip_len - 1) + 1
    if span > num_frames:
        raise ValueError(f"video of {num_frames} frames too short for clip {clip_len}")
    start = min(max(start, 0), num_frames - span)
    return [start + stride * k for k in range(clip_len)]


def _load_clip(
    manifest: Manifest, rec: ClipRecord, indices: list[int], side: int
) -> np.ndarray:
    frames = [
        sampling.bilinear_resize(decode_frame(manifest.frame_path(rec, t)), side)
        for t in indices
    ]
    return np.stack(frames).astype(np.float32)


def _load_clip_batch(
    manifest: Manifest,
    records: list[ClipRecord],
    clip_len: int,
    side: int,
    rng: np.random.Generator,
    jitter: bool,
) -> torch.Tensor:
    clips = []
    for rec in records:
        stride = max(1, rec.num_frames // clip_len)
        span = stride * (clip_len - 1) + 1
        if jitter:
            start = int(rng.integers(0, rec.num_frames - span + 1))
        else:
            start = (rec.num_frames - span) // 2
        clips.append(_load_clip(manifest, rec, clip_indices(rec.num_frames, clip_len, start), side))
    return torch.from_numpy(np.stack(clips))


def video_finetune(
    checkpoint: str | Path,
    train_manifest: Manifest,
    val_manifest: Manifest,
    spec: FinetuneSpec,
    clip_len: int = 4,
) -> tuple[EvalResult, VideoClassifier]:
    """Inflate the image checkpoint over clip_len frames and finetune on
    ordered clips from labelled videos."""
    torch.set_num_threads(1)
    model, _ = network.load_checkpoint(checkpoint)
    video = inflate_to_video(model, clip_len)
    clf = VideoClassifier(video, train_manifest.num_classes, spec.use_cls)
    _init_linear(clf.head, derive_rng(spec.seed, 401))
    train_videos = _video_only(train_manifest)
    val_videos = _video_only(val_manifest)
    return _finetune_classifier(
        clf, train_videos, val_videos, spec, condition="video_finetune",
        video_frames=clip_len,
    )[0], clf


def _video_only(manifest: Manifest) -> Manifest:
    vids = tuple(r for r in manifest.records if r.kind == "video" and r.label is not None)
    if not vids:
        raise ValueError("manifest has no labelled video records")
    return Manifest(vids, manifest.num_classes, manifest.split, manifest.root)


def save_video_classifier(clf: VideoClassifier, path: str | Path) -> Path:
    arrays = {f"param/{k}": v for k, v in network.state_arrays(clf).items()}
    meta = {
        "config": clf.backbone.cfg.to_dict(),
        "frames": clf.backbone.frames,
        "num_classes": clf.head.out_features,
        "use_cls": clf.use_cls,
        "kind": "video_classifier",
    }
    return network.save_archive(path, arrays, meta)


def load_video_classifier(path: str | Path) -> VideoClassifier:
    arrays, meta = network.load_archive(path)
    if meta.get("kind") != "video_classifier":
        raise ValueError(f"{path} is not a video classifier checkpoint")
    cfg = network.ModelConfig.from_dict(meta["config"])
    video = VideoModel(cfg, int(meta["frames"]))
    clf = VideoClassifier(video, int(meta["num_classes"]), bool(meta["use_cls"]))
    clf.load_state_dict(
        {
            k[len("param/"):]: torch.from_numpy(v.copy())
            for k, v in arrays.items()
            if k.startswith("param/")
        },
        strict=True,
    )
    return clf


def _spatial_views(clip: np.ndarray, side: int, n_views: int) -> list[np.ndarray]:
    """1 view: plain resize. 3 views: upscale ~1.15x then take the
    top-left / center / bottom-right crops."""
    if n_views == 1:
        return [np.stack([sampling.bilinear_resize(f, side) for f in clip])]
    big = int(round(side * 1.15))
    upscaled = np.stack([sampling.bilinear_resize(f, big) for f in clip])
    offsets = [0, (big - side) // 2, big - side]
    views = []
    for o in offsets[:n_views]:
        views.append(upscaled[:, o : o + side, o : o + side].astype(np.float32))
    return views


def _clip_logits(clf: VideoClassifier, clip: np.ndarray) -> torch.Tensor:
    with torch.no_grad():
        return clf(torch.from_numpy(clip[None].astype(np.float32)))[0]


def multiview_video_eval(
    video_ckpt: str | Path,
    manifest: Manifest,
    k_clips: int = 7,
    spatial_views: int = 3,
) -> EvalResult:
    """K uniformly spaced temporal clips x spatial crops; logits averaged
    over all K x views forward passes before the argmax."""
    torch.set_num_threads(1)
    clf = load_video_classifier(video_ckpt)
    clf.eval()
    side = clf.backbone.cfg.patch.image_side
    clip_len = clf.backbone.frames
    videos = _video_only(manifest)

    logits_rows, labels = [], []
    for rec in videos.records:
        stride = max(1, rec.num_frames // clip_len)
        span = stride * (clip_len - 1) + 1
        if span > rec.num_frames:
            raise ValueError(f"record {rec.id!r} too short for clip length {clip_len}")
        if k_clips > 1:
            starts = np.round(np.linspace(0, rec.num_frames - span, k_clips)).astype(int)
        else:
            starts = np.array([(rec.num_frames - span) // 2])
        per_view = []
        for start in starts:
            raw = _load_clip(
                videos, rec, clip_indices(rec.num_frames, clip_len, int(start)),
                rec.height,
            )
            for view in _spatial_views(raw, side, spatial_views):
                per_view.append(_clip_logits(clf, view))
        logits_rows.append(torch.stack(per_view).mean(dim=0))
        labels.append(rec.label)

    top1, top5 = _topk_percent(torch.stack(logits_rows), torch.tensor(labels))
    return EvalResult(
        top1, top5, len(labels), f"multiview_k{k_clips}x{spatial_views}"
    )


TEMPORAL_MODES = ("ordered", "shuffled", "repeated")


def temporal_ablation(
    video_ckpt: str | Path,
    manifest: Manifest,
    mode: str,
    n_perms: int = 16,
    perms: list[np.ndarray] | None = None,
    seed: int = 0,
) -> EvalResult:
    """Accuracy with frames in order, under random frame permutations
    (averaged over n_perms), or with every single-frame repetition."""
    if mode not in TEMPORAL_MODES:
        raise ValueError(f"unknown temporal mode {mode!r}")
    torch.set_num_threads(1)
    clf = load_video_classifier(video_ckpt)
    clf.eval()
    side = clf.backbone.cfg.patch.image_side
    clip_len = clf.backbone.frames
    videos = _video_only(manifest)
    for rec in videos.records:
        if rec.num_frames < 2:
            raise ValueError(f"record {rec.id!r} has fewer than 2 frames")

    if mode == "shuffled" and perms is None:
        rng = derive_rng(seed, 501)
        perms = [rng.permutation(clip_len) for _ in range(n_perms)]

    def ordered_clip(rec: ClipRecord) -> np.ndarray:
        stride = max(1, rec.num_frames // clip_len)
        start = (rec.num_frames - (stride * (clip_len - 1) + 1)) // 2
        return _load_clip(
            videos, rec, clip_indices(rec.num_frames, clip_len, start), side
        )

    labels = torch.tensor([r.label for r in videos.records])
    if mode == "ordered":
        logits = torch.stack([_clip_logits(clf, ordered_clip(r)) for r in videos.records])
        top1, top5 = _topk_percent(logits, labels)
        return EvalResult(top1, top5, len(labels), "temporal_ordered")

    accuracies = []
    if mode == "shuffled":
        for perm in perms:
            logits = torch.stack(
                [_clip_logits(clf, ordered_clip(r)[perm]) for r in videos.records]
            )
            accuracies.append(_topk_percent(logits, labels))
        condition = "temporal_shuffled"
    else:
        # repeated: exhaust every single-frame repetition of the eval clip
        for t in range(clip_len):
            logits = torch.stack(
                [
                    _clip_logits(clf, np.repeat(ordered_clip(r)[t][None], clip_len, axis=0))
                    for r in videos.records
                ]
            )
            accuracies.append(_topk_percent(logits, labels))
        condition = "temporal_repeated"
    mean1 = float(np.mean([a for a, _ in accuracies]))
    mean5 = float(np.mean([b for _, b in accuracies]))
    return EvalResult(mean1, mean5, len(labels), condition)
