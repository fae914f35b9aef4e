"""Pose-prediction encoder: DDPM-style downsampling trunk plus pose heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

Tensor = torch.Tensor


@dataclass
class EncoderConfig:
    base_channels: int = 16
    multipliers: list = field(default_factory=lambda: [1, 1, 2])
    blocks_per_stage: int = 2
    resolution: int = 32
    pool: str = "mean"  # "mean" or "flatten"

    @property
    def steps(self) -> int:
        return len(self.multipliers)

    @property
    def latent_dim(self) -> int:
        ch = self.multipliers[-1] * self.base_channels
        if self.pool == "flatten":
            side = self.resolution // 2**self.steps
            return ch * side * side
        return ch

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("need at least one downsampling step")
        if self.resolution % 2**self.steps:
            raise ValueError(f"resolution {self.resolution} not divisible by 2^{self.steps}")
        if self.pool not in ("mean", "flatten"):
            raise ValueError(f"unknown pooling {self.pool!r}")

    @classmethod
    def paper(cls) -> "EncoderConfig":
        return cls(base_channels=64, multipliers=[1, 1, 2, 2, 4], resolution=128)


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal embedding of (possibly fractional) step indices, shape (B, dim)."""
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def norm_layer(ch: int) -> nn.GroupNorm:
    # 8 groups; a single group (layer norm over C,H,W) for narrow layers
    return nn.GroupNorm(8 if ch >= 8 and ch % 8 == 0 else 1, ch)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = norm_layer(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = norm_layer(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class PoseEncoder(nn.Module):
    """Stem conv, then per stage: residual blocks followed by a stride-2 conv."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        C = cfg.base_channels
        self.temb_dim = 4 * C
        self.temb_mlp = nn.Sequential(
            nn.Linear(self.temb_dim, self.temb_dim), nn.SiLU(), nn.Linear(self.temb_dim, self.temb_dim)
        )
        self.stem = nn.Conv2d(3, C, 3, padding=1)
        blocks, downs = nn.ModuleList(), nn.ModuleList()
        ch = C
        for mult in cfg.multipliers:
            out = mult * C
            stage = nn.ModuleList()
            for _ in range(cfg.blocks_per_stage):
                stage.append(ResBlock(ch, out, self.temb_dim))
                ch = out
            blocks.append(stage)
            downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
        self.blocks, self.downs = blocks, downs
        self.out_norm = norm_layer(ch)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x: Tensor, t) -> Tensor:
        """``x``: (B, 3, H, W) image in diffusion range; ``t``: step index per item."""
        res = self.cfg.resolution
        if x.shape[-2:] != (res, res):
            raise ValueError(f"encoder expects {res}x{res} input, got {tuple(x.shape[-2:])}")
        t = torch.as_tensor(t).reshape(-1).expand(x.shape[0])
        temb = self.temb_mlp(timestep_embedding(t, self.temb_dim).to(x.dtype))
        h = self.stem(x)
        for stage, down in zip(self.blocks, self.downs):
            for block in stage:
                h = block(h, temb)
            h = down(h)
        h = F.silu(self.out_norm(h))
        if self.cfg.pool == "flatten":
            return h.flatten(1)
        return h.mean(dim=(-2, -1))


class SingleHead(nn.Module):
    """Two affine maps: axis-angle ``omega`` and translation ``ts``."""

    def __init__(self, latent_dim: int, ts_init=(0.0, 0.0, 0.0)):
        super().__init__()
        self.omega = nn.Linear(latent_dim, 3)
        self.ts = nn.Linear(latent_dim, 3)
        nn.init.zeros_(self.omega.bias)
        with torch.no_grad():
            self.ts.bias.copy_(torch.tensor(ts_init))

    def forward(self, latent):
        return self.omega(latent), self.ts(latent)


class MultiHead(nn.Module):
    """3K candidate pose parameters and K score logits.

    The score head starts at zero so the initial candidate distribution is
    uniform.
    """

    def __init__(self, latent_dim: int, K: int):
        super().__init__()
        self.K = K
        self.pose = nn.Linear(latent_dim, 3 * K)
        self.score = nn.Linear(latent_dim, K)
        nn.init.zeros_(self.pose.bias)
        nn.init.zeros_(self.score.weight)
        nn.init.zeros_(self.score.bias)

    def forward(self, latent):
        return self.pose(latent), self.score(latent)


class PoseNet(nn.Module):
    def __init__(self, cfg: EncoderConfig, mode: str = "multi", K: int = 12, ts_init=(0.0, 0.0, 4.0)):
        super().__init__()
        self.encoder = PoseEncoder(cfg)
        self.mode = mode
        if mode == "multi":
            self.head = MultiHead(cfg.latent_dim, K)
        elif mode == "single":
            self.head = SingleHead(cfg.latent_dim, ts_init)
        else:
            raise ValueError(f"unknown head mode {mode!r}")

    def forward(self, x, t):
        return self.head(self.encoder(x, t))
