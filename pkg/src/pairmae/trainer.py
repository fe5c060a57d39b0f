"""The pretraining loop: decoupled-weight-decay adaptive-moment updates, the
scaled warmup+cosine learning-rate law, per-step loss reporting, collapse
monitoring, and exactly resumable checkpoints.

All per-step randomness (batch assembly, the two view masks) derives
statelessly from (seed, step), so resuming from a checkpoint continues
bit-identically in single-threaded mode without serializing generator state.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import losses, network, patches, sampling
from .corpus import Manifest
from .losses import LossReport, VicRegCoeffs
from .network import ModelConfig, PairModel
from .sampling import BatchPolicies, ViewPair, derive_rng

OBJECTIVES = ("vicmae", "mae_simsiam", "mae_vicreg", "mae_only")


@dataclass(frozen=True)
class OptimSpec:
    base_lr: float = 1.5e-4
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    batch_size: int = 32
    warmup_epochs: int = 2
    total_epochs: int = 40
    lr_ref_batch: int = 256  # lr = base_lr * batch_size / lr_ref_batch

    def __post_init__(self):
        if self.warmup_epochs >= self.total_epochs:
            raise ValueError("warmup_epochs must be < total_epochs")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")


def effective_lr(spec: OptimSpec, epoch_fraction: float) -> float:
    """Scaled peak, linear warmup from zero, then half-cosine decay to zero.

    epoch_fraction is progress through the whole run in [0, 1].
    """
    peak = spec.base_lr * spec.batch_size / spec.lr_ref_batch
    warm = spec.warmup_epochs / spec.total_epochs
    if epoch_fraction < warm:
        return peak * epoch_fraction / warm
    if warm >= 1.0:
        return peak
    progress = (epoch_fraction - warm) / (1.0 - warm)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def no_decay_param(name: str, param: torch.Tensor) -> bool:
    """Normalization gains, biases, the class/mask tokens and the temperature
    are exempt from weight decay."""
    if name.endswith(".bias") or param.dim() <= 1:
        return True
    return "cls_token" in name or "mask_token" in name or "log_tau" in name


class AdamW:
    """Decoupled-weight-decay Adam over named parameters.

    Hand-rolled so the moment buffers checkpoint as plain arrays and the
    update order is the (deterministic) parameter registration order.
    Supports per-parameter lr multipliers for layer-wise decay.
    """

    def __init__(
        self,
        named_params: list[tuple[str, torch.Tensor]],
        spec: OptimSpec,
        lr_scales: dict[str, float] | None = None,
        eps: float = 1e-8,
    ):
        self.spec = spec
        self.eps = eps
        self.names = [n for n, _ in named_params]
        self.params = dict(named_params)
        self.lr_scales = lr_scales or {}
        self.m = {n: torch.zeros_like(p) for n, p in named_params}
        self.v = {n: torch.zeros_like(p) for n, p in named_params}
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.spec.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name in self.names:
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            lr_p = lr * self.lr_scales.get(name, 1.0)
            if self.spec.weight_decay > 0 and not no_decay_param(name, p):
                p.mul_(1.0 - lr_p * self.spec.weight_decay)
            m, v = self.m[name], self.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-lr_p / bc1)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.names:
            out[f"adam_m/{name}"] = self.m[name].numpy()
            out[f"adam_v/{name}"] = self.v[name].numpy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.names:
            self.m[name] = torch.from_numpy(arrays[f"adam_m/{name}"].copy())
            self.v[name] = torch.from_numpy(arrays[f"adam_v/{name}"].copy())
        self.step_count = step_count


@dataclass(frozen=True)
class PretrainConfig:
    seed: int = 0
    objective: str = "vicmae"
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimSpec = field(default_factory=OptimSpec)
    policies: BatchPolicies = field(default_factory=BatchPolicies)
    mask_ratio: float = 0.75
    image_ratio: float = 0.5
    lambda_max: float = 0.05
    switch_fraction: float = 0.25
    lambda_ramp: bool = False
    single_view_recon: bool = False
    vicreg: VicRegCoeffs = field(default_factory=VicRegCoeffs)
    ckpt_every_epochs: int = 0  # 0: final checkpoint only
    num_threads: int = 1

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in [0, 1)")
        if not 0.0 <= self.image_ratio <= 1.0:
            raise ValueError("image_ratio must lie in [0, 1]")
        if self.objective == "mae_simsiam" and self.model.head_out != self.model.enc_width:
            raise ValueError(
                "mae_simsiam compares projector output with the raw class "
                "token, so head_out must equal enc_width"
            )
        side = self.model.patch.image_side
        for name in ("video_augment", "image_augment"):
            policy = getattr(self.policies, name)
            if policy.out_side != side:
                raise ValueError(
                    f"{name} emits {policy.out_side}px views but the model "
                    f"expects {side}px inputs"
                )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @staticmethod
    def from_dict(d: dict) -> "PretrainConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        d["optim"] = OptimSpec(**{**d["optim"], "betas": tuple(d["optim"]["betas"])})
        pol = d["policies"]
        d["policies"] = BatchPolicies(
            sampling=sampling.SamplingPolicy(**pol["sampling"]),
            video_augment=_augment_from_dict(pol["video_augment"]),
            image_augment=_augment_from_dict(pol["image_augment"]),
        )
        d["vicreg"] = VicRegCoeffs(**d["vicreg"])
        return PretrainConfig(**d)


def _augment_from_dict(d: dict) -> sampling.AugmentPolicy:
    return sampling.AugmentPolicy(
        spatial=sampling.SpatialAugment(
            hflip_prob=d["spatial"]["hflip_prob"],
            crop_scale=tuple(d["spatial"]["crop_scale"]),
        ),
        color=sampling.ColorAugment(
            **{**d["color"], "blur_sigma": tuple(d["color"]["blur_sigma"])}
        ),
        out_side=d["out_side"],
    )


def build_model(cfg: PretrainConfig) -> PairModel:
    model = PairModel(cfg.model, init_seed=None)
    network.init_parameters(model, derive_rng(cfg.seed, 1))
    return model


def collapse_monitor(pooled: torch.Tensor) -> float:
    """Mean over dimensions of the per-dimension batch standard deviation."""
    if pooled.shape[0] < 2:
        raise ValueError("collapse monitor needs a batch of at least 2")
    return float(pooled.detach().std(dim=0, unbiased=True).mean())


def views_to_tensors(pairs: list[ViewPair]) -> tuple[torch.Tensor, torch.Tensor]:
    va = torch.from_numpy(np.stack([p.view_a for p in pairs]))
    vb = torch.from_numpy(np.stack([p.view_b for p in pairs]))
    return va, vb


def _recon_targets(tokens: torch.Tensor, normalize: bool) -> torch.Tensor:
    if not normalize:
        return tokens
    mean = tokens.mean(dim=-1, keepdim=True)
    var = tokens.var(dim=-1, keepdim=True, unbiased=True)
    return (tokens - mean) / (var + 1e-6).sqrt()


def pair_forward(
    model: PairModel,
    view_a: torch.Tensor,
    view_b: torch.Tensor,
    cfg: PretrainConfig,
    mask_rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor, float]:
    """Run both views through mask/encode/decode and the contrastive branch.

    Returns (recon_term, contrastive_term, pooled_feature_std). The two views
    draw independent masks from consecutive states of mask_rng.
    """
    pcfg = model.cfg.patch
    n = view_a.shape[0]

    tokens_a = patches.patchify(view_a, pcfg)
    tokens_b = patches.patchify(view_b, pcfg)
    plan_a = patches.make_mask_plan(n, pcfg.num_tokens, cfg.mask_ratio, mask_rng)
    plan_b = patches.make_mask_plan(n, pcfg.num_tokens, cfg.mask_ratio, mask_rng)
    vis_a = torch.gather(
        tokens_a, 1, plan_a.visible_idx.unsqueeze(-1).expand(n, plan_a.num_visible, pcfg.patch_dim)
    )
    vis_b = torch.gather(
        tokens_b, 1, plan_b.visible_idx.unsqueeze(-1).expand(n, plan_b.num_visible, pcfg.patch_dim)
    )

    feats_a = model.encoder(vis_a, plan_a.visible_idx)
    feats_b = model.encoder(vis_b, plan_b.visible_idx)
    local_a = model.local_features(feats_a)
    local_b = model.local_features(feats_b)

    pred_a = model.decoder(local_a, plan_a)
    recon = losses.recon_loss(
        pred_a, _recon_targets(tokens_a, model.cfg.norm_pix_targets), plan_a
    )
    if not cfg.single_view_recon:
        pred_b = model.decoder(local_b, plan_b)
        recon_b = losses.recon_loss(
            pred_b, _recon_targets(tokens_b, model.cfg.norm_pix_targets), plan_b
        )
        recon = 0.5 * (recon + recon_b)

    pooled_a = model.pool(feats_a)
    pooled_b = model.pool(feats_b)
    emb_std = collapse_monitor(torch.cat([pooled_a, pooled_b], dim=0))

    if cfg.objective == "vicmae":
        p = model.project(pooled_a, "predictor")
        z = model.project(pooled_b, "target")
        contrastive = losses.info_nce(
            p, z, model.tau, loss_scale=model.cfg.contrastive_loss_scale
        )
    elif cfg.objective == "mae_simsiam":
        cls_a, cls_b = model.cls_feature(feats_a), model.cls_feature(feats_b)
        p_a = model.project(cls_a, "predictor")
        p_b = model.project(cls_b, "predictor")
        z_a = F.normalize(cls_a, dim=-1)
        z_b = F.normalize(cls_b, dim=-1)
        contrastive = 0.5 * (
            losses.simsiam_loss(p_a, z_b) + losses.simsiam_loss(p_b, z_a)
        )
    elif cfg.objective == "mae_vicreg":
        p = model.project(model.cls_feature(feats_a), "predictor")
        z = model.project(model.cls_feature(feats_b), "target")
        contrastive = losses.vicreg_loss(p, z, cfg.vicreg)
    else:  # mae_only
        contrastive = torch.zeros(())

    return recon, contrastive, emb_std


@dataclass
class TrainerState:
    """Everything the loop owns: parameters, optimizer moments, counters.

    Per-step rng streams are derived from (cfg.seed, step), so this state
    plus the config reproduces the run exactly.
    """

    cfg: PretrainConfig
    model: PairModel
    opt: AdamW
    steps_per_epoch: int
    step: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def epoch(self) -> int:
        return self.step // self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.cfg.optim.total_epochs * self.steps_per_epoch


def init_state(cfg: PretrainConfig, manifest: Manifest) -> TrainerState:
    if not manifest.records:
        raise ValueError("manifest is empty")
    model = build_model(cfg)
    opt = AdamW(list(model.named_parameters()), cfg.optim)
    steps_per_epoch = max(1, len(manifest.records) // cfg.optim.batch_size)
    return TrainerState(cfg=cfg, model=model, opt=opt, steps_per_epoch=steps_per_epoch)


def train_step(state: TrainerState, pairs: list[ViewPair]) -> LossReport:
    """One optimization step; deterministic given (state, pairs)."""
    cfg = state.cfg
    if len(pairs) < 2:
        raise ValueError("training batch must hold at least 2 pairs")
    state.model.train()
    view_a, view_b = views_to_tensors(pairs)
    mask_rng = derive_rng(cfg.seed, 3, state.step)

    recon, contrastive, emb_std = pair_forward(
        state.model, view_a, view_b, cfg, mask_rng
    )
    lam = losses.lambda_schedule(
        min(state.epoch, cfg.optim.total_epochs - 1),
        cfg.optim.total_epochs,
        cfg.lambda_max,
        cfg.switch_fraction,
        cfg.lambda_ramp,
    )
    try:
        report = losses.combined_loss(recon, contrastive, lam)
    except ValueError as exc:
        raise RuntimeError(
            f"non-finite loss at step {state.step}: "
            f"recon={float(recon.detach())}, "
            f"contrastive={float(contrastive.detach())}, lambda={lam}"
        ) from exc

    lr = effective_lr(cfg.optim, state.step / state.total_steps)
    state.opt.zero_grad()
    report.total.backward()
    state.opt.step(lr)
    state.step += 1

    row = report.as_floats()
    row.update({"step": state.step, "epoch": state.epoch, "emb_std": emb_std, "lr": lr})
    state.history.append(row)
    return report


def save_state(state: TrainerState, path: str | Path) -> Path:
    extra = state.opt.state_arrays()
    meta = {
        "pretrain": state.cfg.to_dict(),
        "step": state.step,
        "opt_step": state.opt.step_count,
        "steps_per_epoch": state.steps_per_epoch,
    }
    return network.save_checkpoint(
        path, state.model, step=state.step, extra_arrays=extra, extra_meta=meta
    )


def load_state(path: str | Path, manifest: Manifest) -> TrainerState:
    arrays, meta = network.load_archive(path)
    cfg = PretrainConfig.from_dict(meta["pretrain"])
    model = PairModel(cfg.model, init_seed=None)
    model.load_state_dict(
        {
            k[len("param/"):]: torch.from_numpy(v.copy())
            for k, v in arrays.items()
            if k.startswith("param/")
        },
        strict=True,
    )
    opt = AdamW(list(model.named_parameters()), cfg.optim)
    opt.load_state_arrays(arrays, meta["opt_step"])
    state = TrainerState(
        cfg=cfg,
        model=model,
        opt=opt,
        steps_per_epoch=meta["steps_per_epoch"],
        step=meta["step"],
    )
    if manifest is not None:
        fresh = max(1, len(manifest.records) // cfg.optim.batch_size)
        if fresh != state.steps_per_epoch:
            raise ValueError(
                "resume manifest yields a different epoch length "
                f"({fresh} vs {state.steps_per_epoch})"
            )
    return state


def pretrain(
    manifest: Manifest,
    cfg: PretrainConfig,
    out_dir: str | Path,
    resume: str | Path | None = None,
) -> Path:
    """Run the full schedule; writes metrics.jsonl and checkpoints under
    out_dir and returns the final checkpoint path."""
    torch.set_num_threads(cfg.num_threads)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        state = load_state(resume, manifest)
        metrics_mode = "a"
    else:
        state = init_state(cfg, manifest)
        metrics_mode = "w"

    metrics_path = out_dir / "metrics.jsonl"
    final_path = out_dir / "final.npz"
    with metrics_path.open(metrics_mode) as metrics:
        while state.step < state.total_steps:
            rng_batch = derive_rng(cfg.seed, 2, state.step)
            pairs = sampling.build_batch(
                manifest, cfg.optim.batch_size, cfg.image_ratio, cfg.policies, rng_batch
            )
            epoch_before = state.epoch
            train_step(state, pairs)
            metrics.write(json.dumps(state.history[-1], sort_keys=True) + "\n")
            at_epoch_end = state.epoch != epoch_before or state.step == state.total_steps
            if (
                cfg.ckpt_every_epochs > 0
                and at_epoch_end
                and (epoch_before + 1) % cfg.ckpt_every_epochs == 0
            ):
                save_state(state, out_dir / f"ckpt_ep{epoch_before + 1:04d}.npz")
    save_state(state, final_path)
    return final_path
