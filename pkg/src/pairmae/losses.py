"""Training objectives: masked-patch reconstruction, temperature-scaled
InfoNCE over paired embeddings with in-batch negatives, the negative-free
baselines (stop-gradient cosine and variance/covariance regularization), the
contrastive-weight schedule, and the combined loss report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .patches import MaskPlan


@dataclass
class LossReport:
    """One training step's loss terms. total == recon + lambda * contrastive."""

    recon: object
    contrastive: object
    lambda_effective: float
    total: object
    per_term_grad_norms: dict | None = field(default=None)

    def as_floats(self) -> dict:
        def to_float(v):
            return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

        return {
            "recon": to_float(self.recon),
            "contrastive": to_float(self.contrastive),
            "lambda": float(self.lambda_effective),
            "total": to_float(self.total),
        }


@dataclass(frozen=True)
class VicRegCoeffs:
    lambda_inv: float = 25.0
    mu: float = 25.0
    nu: float = 1.0
    gamma: float = 1.0  # target standard deviation, fixed
    eps: float = 1e-4

    def __post_init__(self):
        for name in ("lambda_inv", "mu", "nu", "gamma", "eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _check_unit_rows(x: torch.Tensor, name: str, tol: float = 1e-4) -> None:
    norms = x.detach().norm(dim=-1)
    worst = (norms - 1.0).abs().max().item()
    if worst > tol:
        raise ValueError(f"{name} rows are not unit-norm (max deviation {worst:.2e})")


def recon_loss(pred: torch.Tensor, target: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
    """Mean over masked tokens of the per-token mean squared error.

    Visible-token predictions contribute exactly zero.
    """
    if pred.shape != target.shape:
        raise ValueError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    mask = plan.mask().to(pred.dtype)
    if mask.sum() == 0:
        raise ValueError("mask plan has zero masked tokens; nothing to reconstruct")
    per_token = ((pred - target) ** 2).mean(dim=-1)  # [N, L]
    return (per_token * mask).sum() / mask.sum()


def info_nce(
    p: torch.Tensor,
    z: torch.Tensor,
    tau,
    loss_scale: float = 1.0,
) -> torch.Tensor:
    """Symmetric InfoNCE over the 2N stacked embeddings.

    Each of the 2N rows is an anchor whose positive is its pair partner; the
    denominator runs over all other 2N-1 rows. tau may be a tensor so a
    learnable temperature can receive gradient.
    """
    if p.shape != z.shape:
        raise ValueError(f"p {tuple(p.shape)} vs z {tuple(z.shape)}")
    n = p.shape[0]
    if n < 2:
        raise ValueError("InfoNCE needs a batch of at least 2 pairs")
    _check_unit_rows(p, "p")
    _check_unit_rows(z, "z")

    e = torch.cat([p, z], dim=0)  # [2N, D]
    logits = (e @ e.T) / tau
    eye = torch.eye(2 * n, dtype=torch.bool, device=e.device)
    logits = logits.masked_fill(eye, float("-inf"))
    targets = torch.cat(
        [torch.arange(n, 2 * n), torch.arange(0, n)]
    ).to(e.device)
    return F.cross_entropy(logits, targets) * loss_scale


def simsiam_loss(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Mean of 2 * (1 - p_i . z_i) with z held constant (stop-gradient).

    Row pairs on the unit sphere, so this equals the mean squared distance.
    """
    if p.shape != z.shape:
        raise ValueError(f"p {tuple(p.shape)} vs z {tuple(z.shape)}")
    _check_unit_rows(p, "p")
    _check_unit_rows(z, "z")
    return (2.0 * (1.0 - (p * z.detach()).sum(dim=-1))).mean()


def vicreg_loss(p: torch.Tensor, z: torch.Tensor, coeffs: VicRegCoeffs) -> torch.Tensor:
    """Invariance + variance-hinge + covariance penalty over both branches."""
    if p.shape != z.shape:
        raise ValueError(f"p {tuple(p.shape)} vs z {tuple(z.shape)}")
    n, d = p.shape
    if n < 2:
        raise ValueError("variance term undefined for batch < 2")

    inv = ((p - z) ** 2).sum(dim=1).mean()

    def variance_term(x: torch.Tensor) -> torch.Tensor:
        std = torch.sqrt(x.var(dim=0, unbiased=True) + coeffs.eps)
        return F.relu(coeffs.gamma - std).mean()

    def covariance_term(x: torch.Tensor) -> torch.Tensor:
        xc = x - x.mean(dim=0, keepdim=True)
        cov = (xc.T @ xc) / (n - 1)
        off_diag = cov - torch.diag_embed(torch.diagonal(cov))
        return (off_diag**2).sum() / d

    return (
        coeffs.lambda_inv * inv
        + coeffs.mu * (variance_term(p) + variance_term(z))
        + coeffs.nu * (covariance_term(p) + covariance_term(z))
    )


def lambda_schedule(
    epoch: int,
    total_epochs: int,
    lambda_max: float,
    switch_fraction: float,
    ramp: bool = False,
) -> float:
    """Contrastive weight: 0 before the switch epoch, lambda_max after.

    ramp=True instead grows the weight linearly from 0 so it reaches
    lambda_max exactly at the switch epoch and stays there.
    """
    if not 0.0 <= switch_fraction <= 1.0:
        raise ValueError(f"switch_fraction {switch_fraction} outside [0, 1]")
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    switch_epoch = switch_fraction * total_epochs
    if ramp:
        if switch_epoch == 0:
            return lambda_max
        return lambda_max * min(1.0, epoch / switch_epoch)
    return 0.0 if epoch < switch_epoch else lambda_max


def combined_loss(recon, contrastive, lambda_effective: float) -> LossReport:
    """Combine the two terms; rejects non-finite inputs naming the bad term."""
    for name, value in (("recon", recon), ("contrastive", contrastive)):
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if math.isnan(v) or math.isinf(v):
            raise ValueError(f"non-finite {name} term: {v}")
    total = recon + lambda_effective * contrastive
    return LossReport(
        recon=recon,
        contrastive=contrastive,
        lambda_effective=lambda_effective,
        total=total,
    )
