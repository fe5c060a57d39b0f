"""The encoder/decoder transformer pair, fixed sine-cosine position tables,
token pooling, the shared projection head producing unit-norm embeddings,
image-to-video weight inflation, and exact-round-trip checkpointing.

All parameter initialization is driven by a numpy generator so that model
construction is reproducible independent of torch global RNG state.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .patches import MaskPlan, PatchConfig, restore_with_mask_token

POOLING_METHODS = ("mean", "max", "gem")


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale transformer sizes; every mechanism of the full-size recipe
    is preserved at 64px / patch 8 (64 tokens)."""

    patch: PatchConfig = field(default_factory=PatchConfig)
    enc_depth: int = 4
    enc_width: int = 192
    enc_heads: int = 3
    mlp_ratio: float = 4.0
    dec_depth: int = 2
    dec_width: int = 96
    dec_heads: int = 3
    pooling: str = "mean"
    gem_p: float = 3.0
    head_hidden: int = 384
    head_out: int = 128
    tau: float = 0.1
    learnable_log_tau: bool = False
    contrastive_loss_scale: float = 1.0
    use_cls_token: bool = True
    norm_pix_targets: bool = False

    def __post_init__(self):
        if self.enc_width % self.enc_heads != 0:
            raise ValueError("encoder width must divide into heads")
        if self.dec_width % self.dec_heads != 0:
            raise ValueError("decoder width must divide into heads")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.gem_p < 1:
            raise ValueError("gem_p must be >= 1")
        if self.pooling not in POOLING_METHODS:
            raise ValueError(f"unknown pooling {self.pooling!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["patch"] = dataclasses.asdict(self.patch)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["patch"] = PatchConfig(**d["patch"])
        return ModelConfig(**d)


def sincos_posembed(num_tokens: int, dim: int) -> torch.Tensor:
    """Fixed 2-D factorized sine-cosine table [L, D] for a sqrt(L) grid.

    Half the channels encode the row coordinate, half the column; each half
    splits into sine and cosine banks over a geometric frequency ladder.
    """
    grid = int(round(math.sqrt(num_tokens)))
    if grid * grid != num_tokens:
        raise ValueError(f"token count {num_tokens} is not a square grid")
    if dim % 2 != 0:
        raise ValueError(f"embedding dim {dim} must be even")
    if dim % 4 != 0:
        raise ValueError(f"embedding dim {dim} must be even per grid axis (dim % 4 == 0)")

    def axis_table(positions: np.ndarray, d: int) -> np.ndarray:
        omega = 1.0 / (10000.0 ** (np.arange(d // 2, dtype=np.float64) / (d // 2)))
        angles = positions[:, None] * omega[None, :]
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    rows, cols = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    table = np.concatenate(
        [
            axis_table(rows.reshape(-1).astype(np.float64), dim // 2),
            axis_table(cols.reshape(-1).astype(np.float64), dim // 2),
        ],
        axis=1,
    )
    return torch.from_numpy(table).float()


class _StochasticDepth:
    """Holder for the per-step rng used by drop-path during finetuning.

    When rng is None (the default, and always during pretraining) drop-path
    is the identity.
    """

    def __init__(self):
        self.rng: np.random.Generator | None = None
        self.p: float = 0.0


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, l, d = x.shape
        qkv = self.qkv(x).reshape(n, l, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, l, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block: LN -> MHA -> residual, LN -> MLP -> residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, depth_ctl: _StochasticDepth):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self._depth_ctl = depth_ctl

    def _residual(self, x: torch.Tensor, branch: torch.Tensor) -> torch.Tensor:
        ctl = self._depth_ctl
        if ctl.p > 0.0 and self.training and ctl.rng is not None:
            keep = torch.from_numpy(
                (ctl.rng.random(x.shape[0]) >= ctl.p).astype(np.float32)
            ).to(x.dtype)
            branch = branch * keep.view(-1, 1, 1) / (1.0 - ctl.p)
        return x + branch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self._residual(x, self.attn(self.norm1(x)))
        x = self._residual(x, self.mlp(self.norm2(x)))
        return x


class ProjectionHead(nn.Module):
    """Two Linear->BatchNorm->ReLU blocks (first widening to the hidden size)
    followed by an affine output layer. Shared by the predictor and target
    branches, whose outputs are l2-normalized by project()."""

    def __init__(self, dim_in: int, hidden: int, dim_out: int):
        super().__init__()
        self.blocks = nn.Sequential(
            nn.Linear(dim_in, hidden),
            nn.BatchNorm1d(hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.BatchNorm1d(hidden),
            nn.ReLU(),
        )
        self.out = nn.Linear(hidden, dim_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training and x.shape[0] < 2:
            raise ValueError("projection head needs batch >= 2 in training mode")
        return self.out(self.blocks(x))


def pool(tokens: torch.Tensor, method: str, gem_p: float = 3.0) -> torch.Tensor:
    """Aggregate [N, L, D] local token features into one [N, D] vector.

    gem uses rectified inputs with a 1e-6 floor: p=1 recovers the mean on
    non-negative inputs, large p approaches the coordinatewise max.
    """
    if method == "mean":
        return tokens.mean(dim=1)
    if method == "max":
        return tokens.max(dim=1).values
    if method == "gem":
        safe = F.relu(tokens) + 1e-6
        return safe.pow(gem_p).mean(dim=1).pow(1.0 / gem_p)
    raise ValueError(f"unknown pooling method {method!r}")


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch
        self.patch_embed = nn.Linear(p.patch_dim, cfg.enc_width)
        self.register_buffer(
            "pos_table", sincos_posembed(p.num_tokens, cfg.enc_width), persistent=True
        )
        self.depth_ctl = _StochasticDepth()
        if cfg.use_cls_token:
            self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.enc_width))
        self.blocks = nn.ModuleList(
            Block(cfg.enc_width, cfg.enc_heads, cfg.mlp_ratio, self.depth_ctl)
            for _ in range(cfg.enc_depth)
        )
        self.norm = nn.LayerNorm(cfg.enc_width)

    def forward(
        self, pixel_tokens: torch.Tensor, visible_idx: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Embed pixel tokens, add their positional rows, run the blocks.

        pixel_tokens: [N, V, patch_dim] (V = L when visible_idx is None).
        Returns [N, V(+1 cls), D] with the class token first when present.
        """
        n, v, d = pixel_tokens.shape
        if d != self.cfg.patch.patch_dim:
            raise ValueError(
                f"token dim {d} does not match patch dim {self.cfg.patch.patch_dim}"
            )
        x = self.patch_embed(pixel_tokens)
        if visible_idx is None:
            if v != self.cfg.patch.num_tokens:
                raise ValueError("full-length forward requires all tokens")
            x = x + self.pos_table.unsqueeze(0)
        else:
            pos = self.pos_table[visible_idx.reshape(-1)].reshape(n, v, -1)
            x = x + pos
        if self.cfg.use_cls_token:
            cls = self.cls_token.expand(n, 1, -1)
            x = torch.cat([cls, x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(cfg.enc_width, cfg.dec_width)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.dec_width))
        self.register_buffer(
            "pos_table",
            sincos_posembed(cfg.patch.num_tokens, cfg.dec_width),
            persistent=True,
        )
        depth_ctl = _StochasticDepth()  # decoder never uses drop-path
        self.blocks = nn.ModuleList(
            Block(cfg.dec_width, cfg.dec_heads, cfg.mlp_ratio, depth_ctl)
            for _ in range(cfg.dec_depth)
        )
        self.norm = nn.LayerNorm(cfg.dec_width)
        self.pred = nn.Linear(cfg.dec_width, cfg.patch.patch_dim)

    def forward(self, encoded_visible: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
        """Project to decoder width, fill masked slots with the mask token,
        add full-length positions, decode, and predict pixel patches.

        encoded_visible: [N, V, enc_width] local features (class token
        already stripped). Returns [N, L, patch_dim].
        """
        x = self.embed(encoded_visible)
        x = restore_with_mask_token(x, plan, self.mask_token)
        x = x + self.pos_table.unsqueeze(0)
        for blk in self.blocks:
            x = blk(x)
        return self.pred(self.norm(x))


class PairModel(nn.Module):
    """Encoder + decoder + shared projection head for paired-view training."""

    def __init__(self, cfg: ModelConfig, init_seed: int | None = 0):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.head = ProjectionHead(cfg.enc_width, cfg.head_hidden, cfg.head_out)
        if cfg.learnable_log_tau:
            self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.tau)))
        if init_seed is not None:
            init_parameters(self, np.random.default_rng(np.uint64(init_seed)))

    @property
    def tau(self):
        if self.cfg.learnable_log_tau:
            return self.log_tau.exp()
        return self.cfg.tau

    def local_features(self, features: torch.Tensor) -> torch.Tensor:
        """Strip the class token; pooling runs over local features only."""
        return features[:, 1:] if self.cfg.use_cls_token else features

    def cls_feature(self, features: torch.Tensor) -> torch.Tensor:
        if not self.cfg.use_cls_token:
            raise ValueError("model has no class token")
        return features[:, 0]

    def pool(self, features: torch.Tensor) -> torch.Tensor:
        return pool(self.local_features(features), self.cfg.pooling, self.cfg.gem_p)

    def project(self, pooled: torch.Tensor, which: str = "predictor") -> torch.Tensor:
        """Unit-norm embedding through the shared head. The predictor and
        target branches are symmetric and share parameters, so `which` only
        labels the call."""
        if which not in ("predictor", "target"):
            raise ValueError(f"unknown projection branch {which!r}")
        out = self.head(pooled)
        return F.normalize(out, dim=-1)


def init_parameters(model: nn.Module, rng: np.random.Generator) -> None:
    """Deterministic init: fan-balanced uniform for affine maps, normal(0.02)
    for the class and mask tokens, ones/zeros for normalization layers."""
    for name, p in model.named_parameters():
        with torch.no_grad():
            if "cls_token" in name or "mask_token" in name:
                p.copy_(torch.from_numpy(
                    rng.normal(0.0, 0.02, size=tuple(p.shape)).astype(np.float32)
                ))
            elif name.endswith("log_tau"):
                continue
            elif p.dim() >= 2:
                fan_out, fan_in = p.shape[0], int(np.prod(p.shape[1:]))
                limit = math.sqrt(6.0 / (fan_in + fan_out))
                p.copy_(torch.from_numpy(
                    rng.uniform(-limit, limit, size=tuple(p.shape)).astype(np.float32)
                ))
            elif name.endswith(".bias"):
                p.zero_()
            else:  # 1-d weights: LayerNorm / BatchNorm gains
                p.fill_(1.0)


class VideoTokenizer(nn.Module):
    """Tubelet embedding inflated from an image patch embedding: the spatial
    kernel is replicated T times, each copy scaled by 1/T, so a clip of T
    identical frames embeds exactly like the single image."""

    def __init__(self, frames: int, patch_dim: int, width: int):
        super().__init__()
        self.frames = frames
        self.kernel = nn.Parameter(torch.zeros(frames, width, patch_dim))
        self.bias = nn.Parameter(torch.zeros(width))

    @staticmethod
    def from_image_embed(embed: nn.Linear, frames: int) -> "VideoTokenizer":
        if frames < 1:
            raise ValueError("temporal length must be >= 1")
        width, patch_dim = embed.weight.shape
        tok = VideoTokenizer(frames, patch_dim, width)
        with torch.no_grad():
            tok.kernel.copy_(embed.weight.unsqueeze(0).expand(frames, -1, -1) / frames)
            tok.bias.copy_(embed.bias)
        return tok

    def forward(self, frame_tokens: torch.Tensor) -> torch.Tensor:
        """[N, T, L, patch_dim] per-frame pixel tokens -> [N, L, width]."""
        n, t, l, d = frame_tokens.shape
        if t != self.frames:
            raise ValueError(f"clip has {t} frames, tokenizer expects {self.frames}")
        return torch.einsum("ntld,twd->nlw", frame_tokens, self.kernel) + self.bias


class VideoModel(nn.Module):
    """Image encoder inflated over time: tubelet tokenizer plus the encoder's
    attention stack with parameters replicated (i.e. reused) unscaled."""

    def __init__(self, cfg: ModelConfig, frames: int):
        super().__init__()
        self.cfg = cfg
        self.frames = frames
        base = Encoder(cfg)
        self.tokenizer = VideoTokenizer(frames, cfg.patch.patch_dim, cfg.enc_width)
        self.register_buffer("pos_table", base.pos_table, persistent=True)
        if cfg.use_cls_token:
            self.cls_token = base.cls_token
        self.blocks = base.blocks
        self.norm = base.norm
        self.depth_ctl = base.depth_ctl

    def forward(self, frame_tokens: torch.Tensor) -> torch.Tensor:
        """[N, T, L, patch_dim] -> [N, L(+1 cls), D] features."""
        x = self.tokenizer(frame_tokens)
        x = x + self.pos_table.unsqueeze(0)
        if self.cfg.use_cls_token:
            cls = self.cls_token.expand(x.shape[0], 1, -1)
            x = torch.cat([cls, x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def local_features(self, features: torch.Tensor) -> torch.Tensor:
        return features[:, 1:] if self.cfg.use_cls_token else features

    def pool(self, features: torch.Tensor) -> torch.Tensor:
        return pool(self.local_features(features), self.cfg.pooling, self.cfg.gem_p)


def inflate_to_video(model: PairModel, frames: int) -> VideoModel:
    """Build a video-capable encoder from image-pretrained weights."""
    if frames < 1:
        raise ValueError("temporal length must be >= 1")
    video = VideoModel(model.cfg, frames)
    video.tokenizer = VideoTokenizer.from_image_embed(model.encoder.patch_embed, frames)
    enc_state = model.encoder.state_dict()
    enc_state = {k: v for k, v in enc_state.items() if not k.startswith("patch_embed.")}
    missing, unexpected = video.load_state_dict(enc_state, strict=False)
    if unexpected or any(not k.startswith("tokenizer.") for k in missing):
        raise RuntimeError(f"inflation state mismatch: {missing} / {unexpected}")
    return video


# ---------------------------------------------------------------------------
# Checkpoint archives: one .npz mapping names to arrays, exact round trip.
# ---------------------------------------------------------------------------


def state_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {
        f"{prefix}{name}": tensor.detach().cpu().numpy()
        for name, tensor in module.state_dict().items()
    }


def save_archive(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    """Write a single npz archive with sorted keys and a JSON meta record.

    Sorted insertion plus fixed JSON serialization keeps re-saves of equal
    state byte-identical.
    """
    path = Path(path)
    payload = dict(arrays)
    payload["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    ).copy()
    ordered = {k: payload[k] for k in sorted(payload)}
    buf = io.BytesIO()
    np.savez(buf, **ordered)
    path.write_bytes(buf.getvalue())
    return path


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
    return arrays, meta


def save_checkpoint(
    path: str | Path,
    model: PairModel,
    step: int = 0,
    extra_arrays: dict[str, np.ndarray] | None = None,
    extra_meta: dict | None = None,
) -> Path:
    arrays = {f"param/{k}": v for k, v in state_arrays(model).items()}
    if extra_arrays:
        arrays.update(extra_arrays)
    meta = {"config": model.cfg.to_dict(), "step": int(step)}
    if extra_meta:
        meta.update(extra_meta)
    return save_archive(path, arrays, meta)


def load_checkpoint(path: str | Path) -> tuple[PairModel, dict]:
    """Rebuild a PairModel from an archive; returns (model, meta)."""
    arrays, meta = load_archive(path)
    cfg = ModelConfig.from_dict(meta["config"])
    model = PairModel(cfg, init_seed=None)
    state = {
        k[len("param/"):]: torch.from_numpy(v)
        for k, v in arrays.items()
        if k.startswith("param/")
    }
    model.load_state_dict(state, strict=True)
    return model, meta
