"""Local feature fusion and adaption: concatenate a CNN feature with the decoder's
image-path features and mix channels back to the embedding width with a 1x1 conv."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ShapeMismatch
from .common import to_map, to_tokens


def resample_to(feature: torch.Tensor, h: int, w: int) -> torch.Tensor:
    if feature.shape[-2:] == (h, w):
        return feature
    return F.interpolate(feature, size=(h, w), mode="bilinear", align_corners=False)


class LFFA(nn.Module):
    def __init__(self, cnn_channels: int, dim: int):
        super().__init__()
        self.cnn_channels = cnn_channels
        self.dim = dim
        self.proj = nn.Conv2d(cnn_channels + dim, dim, 1)
        self.reset_parameters()

    def reset_parameters(self, cnn_part: str = "random"):
        """Identity on the key channels; CNN columns random (default) or zero."""
        with torch.no_grad():
            if cnn_part == "zero":
                self.proj.weight.zero_()
            else:
                nn.init.kaiming_uniform_(self.proj.weight, a=5**0.5)
            self.proj.weight[:, self.cnn_channels:, 0, 0] = torch.eye(self.dim)
            self.proj.bias.zero_()

    def select_keys(self):
        self.reset_parameters("zero")

    def select_cnn(self):
        if self.cnn_channels != self.dim:
            raise ShapeMismatch("selecting CNN channels needs cnn_channels == dim")
        with torch.no_grad():
            self.proj.weight.zero_()
            self.proj.weight[:, : self.cnn_channels, 0, 0] = torch.eye(self.dim)
            self.proj.bias.zero_()

    def forward(self, f_cnn: torch.Tensor, keys: torch.Tensor, grid: tuple[int, int] | None = None) -> torch.Tensor:
        return lffa_fuse(f_cnn, keys, self.proj, grid)


def lffa_fuse(f_cnn: torch.Tensor, keys: torch.Tensor, proj: nn.Conv2d, grid: tuple[int, int] | None = None):
    """Fuse a CNN feature map into decoder keys.

    ``keys`` is either a map (N, D, h, w) or tokens (N, h*w, D); tokens need
    ``grid`` unless h == w. The output takes the same form as ``keys``.
    """
    tokens = keys.ndim == 3
    if tokens:
        n, hw, d = keys.shape
        h, w = grid if grid is not None else (int(round(hw**0.5)),) * 2
        if h * w != hw:
            raise ShapeMismatch(f"cannot reshape {hw} tokens to a {h}x{w} grid")
        key_map = to_map(keys, h, w)
    else:
        key_map = keys
        h, w = keys.shape[-2:]
    if f_cnn.ndim != 4 or f_cnn.shape[0] != key_map.shape[0]:
        raise ShapeMismatch(f"CNN feature {tuple(f_cnn.shape)} incompatible with keys {tuple(keys.shape)}")
    if f_cnn.shape[1] + key_map.shape[1] != proj.in_channels:
        raise ShapeMismatch(
            f"fusion expects {proj.in_channels} channels, got {f_cnn.shape[1]} + {key_map.shape[1]}"
        )
    fused = proj(torch.cat([resample_to(f_cnn, h, w), key_map], dim=1))
    # contiguous tokens keep downstream matmuls on the same kernels as unfused keys
    return to_tokens(fused).contiguous() if tokens else fused
