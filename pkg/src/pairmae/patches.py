"""Patch algebra: patchify/unpatchify, random token masking with a restore
permutation, and mask-token insertion for the decoder.

Masking follows the shuffle-and-truncate recipe: per-sample uniform noise is
argsorted, the first round(L*(1-ratio)) positions stay visible, and the
inverse argsort restores raster order downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class PatchConfig:
    image_side: int = 64
    patch_side: int = 8
    channels: int = 3

    def __post_init__(self):
        if self.image_side % self.patch_side != 0:
            raise ValueError(
                f"image side {self.image_side} not divisible by patch side "
                f"{self.patch_side}"
            )

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_side

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_side * self.patch_side * self.channels


@dataclass(frozen=True)
class MaskPlan:
    """Per-row visible/masked index sets plus the restore permutation.

    restore_perm maps shuffled order (visible tokens first, then masked) back
    to raster order: shuffled[restore_perm] is in raster order.
    """

    mask_ratio: float
    visible_idx: torch.Tensor  # [N, V] long
    masked_idx: torch.Tensor  # [N, L-V] long
    restore_perm: torch.Tensor  # [N, L] long

    @property
    def batch(self) -> int:
        return self.visible_idx.shape[0]

    @property
    def num_visible(self) -> int:
        return self.visible_idx.shape[1]

    @property
    def num_tokens(self) -> int:
        return self.restore_perm.shape[1]

    def mask(self) -> torch.Tensor:
        """[N, L] float mask, 1 at masked positions, 0 at visible."""
        m = torch.ones(self.batch, self.num_tokens)
        m.scatter_(1, self.visible_idx, 0.0)
        return m


def patchify(images: torch.Tensor, cfg: PatchConfig) -> torch.Tensor:
    """[N, H, W, C] images -> [N, L, patch_dim] tokens in raster order.

    Lossless: each token is the flattened (p, p, C) patch.
    """
    n, h, w, c = images.shape
    if (h, w, c) != (cfg.image_side, cfg.image_side, cfg.channels):
        raise ValueError(
            f"image shape {(h, w, c)} does not match config "
            f"{(cfg.image_side, cfg.image_side, cfg.channels)}"
        )
    p, g = cfg.patch_side, cfg.grid
    x = images.reshape(n, g, p, g, p, c)
    x = x.permute(0, 1, 3, 2, 4, 5)  # [N, g, g, p, p, C]
    return x.reshape(n, g * g, p * p * c)


def unpatchify(tokens: torch.Tensor, cfg: PatchConfig) -> torch.Tensor:
    """Exact inverse of patchify: [N, L, patch_dim] -> [N, H, W, C]."""
    n, l, d = tokens.shape
    if l != cfg.num_tokens or d != cfg.patch_dim:
        raise ValueError(
            f"token shape {(l, d)} does not match config "
            f"{(cfg.num_tokens, cfg.patch_dim)}"
        )
    p, g, c = cfg.patch_side, cfg.grid, cfg.channels
    x = tokens.reshape(n, g, g, p, p, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(n, g * p, g * p, c)


def visible_count(num_tokens: int, mask_ratio: float) -> int:
    return int(round(num_tokens * (1.0 - mask_ratio)))


def make_mask_plan(
    batch: int, num_tokens: int, mask_ratio: float, rng: np.random.Generator
) -> MaskPlan:
    """Draw per-sample independent masks (uniform without replacement)."""
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError(f"mask_ratio {mask_ratio} outside [0, 1)")
    keep = visible_count(num_tokens, mask_ratio)
    if keep == 0:
        raise ValueError(f"mask_ratio {mask_ratio} leaves no visible tokens")
    noise = rng.random((batch, num_tokens))
    ids_shuffle = np.argsort(noise, axis=1)
    ids_restore = np.argsort(ids_shuffle, axis=1)
    return MaskPlan(
        mask_ratio=mask_ratio,
        visible_idx=torch.from_numpy(ids_shuffle[:, :keep].copy()),
        masked_idx=torch.from_numpy(ids_shuffle[:, keep:].copy()),
        restore_perm=torch.from_numpy(ids_restore),
    )


def random_mask(
    tokens: torch.Tensor, mask_ratio: float, rng: np.random.Generator
) -> tuple[torch.Tensor, MaskPlan]:
    """Keep a uniform random subset of tokens; return them plus the plan."""
    n, l, d = tokens.shape
    plan = make_mask_plan(n, l, mask_ratio, rng)
    idx = plan.visible_idx.unsqueeze(-1).expand(n, plan.num_visible, d)
    return torch.gather(tokens, 1, idx), plan


def restore_with_mask_token(
    encoded_visible: torch.Tensor, plan: MaskPlan, mask_token: torch.Tensor
) -> torch.Tensor:
    """Insert the learned mask token at masked positions, raster order out.

    encoded_visible: [N, V, D]; mask_token broadcastable to [1, 1, D].
    """
    n, v, d = encoded_visible.shape
    if n != plan.batch or v != plan.num_visible:
        raise ValueError(
            f"encoded shape {(n, v)} does not match plan "
            f"{(plan.batch, plan.num_visible)}"
        )
    fill = mask_token.reshape(1, 1, d).expand(n, plan.num_tokens - v, d)
    shuffled = torch.cat([encoded_visible, fill], dim=1)
    idx = plan.restore_perm.unsqueeze(-1).expand(n, plan.num_tokens, d)
    return torch.gather(shuffled, 1, idx)
