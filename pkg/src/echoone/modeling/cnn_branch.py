"""Learnable CNN side branch: local features for LFFA and cross-branch encoder tuning."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ShapeError
from .common import Attention, to_tokens
from .config import ModelConfig


def _norm(c):
    return nn.GroupNorm(min(8, c // 2) or 1, c)


class ResidualBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, padding=1, bias=False)
        self.norm1 = _norm(c)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1, bias=False)
        self.norm2 = _norm(c)

    def forward(self, x):
        out = F.gelu(self.norm1(self.conv1(x)))
        return F.gelu(x + self.norm2(self.conv2(out)))


class DownLayer(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.down = nn.Sequential(nn.Conv2d(cin, cout, 3, 2, 1, bias=False), _norm(cout), nn.GELU())
        self.res = ResidualBlock(cout)

    def forward(self, x):
        return self.res(self.down(x))


class CrossBranchAttention(nn.Module):
    """Single-head attention from CNN features (queries) to encoder tokens.

    The result is added to the tokens through a per-channel gate that starts at
    zero, so a fresh branch leaves the encoder untouched.
    """

    def __init__(self, cnn_channels: int, dim: int):
        super().__init__()
        self.cnn_proj = nn.Linear(cnn_channels, dim)
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads=1)
        self.gate = nn.Parameter(torch.zeros(dim))

    def forward(self, tokens: torch.Tensor, feature: torch.Tensor, grid: int) -> torch.Tensor:
        if feature.shape[-2:] != (grid, grid):
            feature = F.interpolate(feature, size=(grid, grid), mode="bilinear", align_corners=False)
        q = self.norm_q(self.cnn_proj(to_tokens(feature)))
        kv = self.norm_kv(tokens)
        return tokens + self.gate * self.attn(q, kv, kv)


class CnnBranch(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        s = config.stem_width
        self.stem = nn.Sequential(nn.Conv2d(1, s, 3, padding=1, bias=False), _norm(s), nn.GELU(), ResidualBlock(s))
        widths = (s,) + config.cnn_widths
        self.layers = nn.ModuleList(DownLayer(a, b) for a, b in zip(widths, widths[1:]))
        self.tuners = nn.ModuleList(CrossBranchAttention(c, config.embed_dim) for c in config.cnn_widths)

    def forward(self, pixels: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem((pixels - 0.5) / 0.25)
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats

    def tune(self, k: int, tokens: torch.Tensor, features: list[torch.Tensor]) -> torch.Tensor:
        expected = self.config.grid**2
        if tokens.ndim != 3 or tokens.shape[1] != expected or tokens.shape[2] != self.config.embed_dim:
            raise ShapeError(
                f"encoder intermediate must be (N, {expected}, {self.config.embed_dim}), got {tuple(tokens.shape)}"
            )
        return self.tuners[k](tokens, features[k], self.config.grid)
