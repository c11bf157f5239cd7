"""Plain ViT image encoder with hook points for the CNN tuning branch."""

from __future__ import annotations

from typing import Callable

import torch
from torch import nn

from ..errors import ShapeError
from .common import Attention, LayerNorm2d, MLPBlock, to_map
from .config import ModelConfig

PIXEL_MEAN, PIXEL_STD = 0.5, 0.25


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLPBlock(dim, int(dim * mlp_ratio))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h)
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d, g = config.embed_dim, config.grid
        self.patch_embed = nn.Conv2d(1, d, config.patch_size, config.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, g * g, d))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(Block(d, config.encoder_heads, config.mlp_ratio) for _ in range(config.encoder_depth))
        self.neck = nn.Sequential(
            nn.Conv2d(d, d, 1, bias=False), LayerNorm2d(d), nn.Conv2d(d, d, 3, padding=1, bias=False), LayerNorm2d(d)
        )

    def check_input(self, pixels: torch.Tensor) -> None:
        s = self.config.input_size
        if pixels.ndim != 4 or pixels.shape[1] != 1 or tuple(pixels.shape[-2:]) != (s, s):
            raise ShapeError(f"image encoder expects (N, 1, {s}, {s}), got {tuple(pixels.shape)}")

    def forward(
        self,
        pixels: torch.Tensor,
        tune: Callable[[int, torch.Tensor], torch.Tensor] | None = None,
        intermediates: list | None = None,
    ) -> torch.Tensor:
        """Embed pixels to (N, D, h, w).

        ``tune(k, tokens)`` is called after each designated block (k = 0..3) and
        returns the refined tokens. ``intermediates`` collects the tokens seen by
        the tuner.
        """
        self.check_input(pixels)
        x = self.patch_embed((pixels - PIXEL_MEAN) / PIXEL_STD).flatten(2).transpose(1, 2) + self.pos_embed
        hooks = {}
        for k, b in enumerate(self.config.tuning_blocks):
            hooks.setdefault(b, []).append(k)
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            for k in hooks.get(i, ()):
                if intermediates is not None:
                    intermediates.append(x)
                if tune is not None:
                    x = tune(k, x)
        g = self.config.grid
        return self.neck(to_map(x, g, g))
