from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ShapeMismatch
from .common import LayerNorm2d
from .config import ModelConfig


class PositionEmbeddingRandom(nn.Module):
    """Random Fourier features of normalized (x, y) coordinates."""

    def __init__(self, num_pos_feats: int, scale: float = 1.0):
        super().__init__()
        self.register_buffer("gaussian_matrix", scale * torch.randn((2, num_pos_feats)))

    def _encode(self, coords):
        coords = (2 * coords - 1) @ self.gaussian_matrix.to(coords.dtype)
        coords = 2 * np.pi * coords
        return torch.cat([torch.sin(coords), torch.cos(coords)], dim=-1)

    def forward(self, size: int) -> torch.Tensor:
        g = self.gaussian_matrix
        grid = torch.ones((size, size), dtype=g.dtype, device=g.device)
        y = (grid.cumsum(0) - 0.5) / size
        x = (grid.cumsum(1) - 0.5) / size
        return self._encode(torch.stack([x, y], dim=-1)).permute(2, 0, 1)

    def forward_with_coords(self, coords: torch.Tensor, image_size: int) -> torch.Tensor:
        return self._encode(coords.clone() / image_size)


class PromptEncoder(nn.Module):
    """Sparse (point) and dense (soft mask) prompt embeddings."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d, g = config.embed_dim, config.grid
        self.config = config
        self.pe_layer = PositionEmbeddingRandom(d // 2)
        self.point_embeddings = nn.ModuleList(nn.Embedding(1, d) for _ in range(2))
        self.not_a_point_embed = nn.Embedding(1, d)
        self.mask_input_size = 4 * g
        c = config.mask_in_chans
        self.mask_downscaling = nn.Sequential(
            nn.Conv2d(config.num_structures, c // 4, 2, 2),
            LayerNorm2d(c // 4),
            nn.GELU(),
            nn.Conv2d(c // 4, c, 2, 2),
            LayerNorm2d(c),
            nn.GELU(),
            nn.Conv2d(c, d, 1),
        )
        self.no_mask_embed = nn.Embedding(1, d)

    def get_dense_pe(self) -> torch.Tensor:
        return self.pe_layer(self.config.grid)[None]

    def embed_points(self, coords: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        emb = self.pe_layer.forward_with_coords(coords + 0.5, self.config.input_size)
        emb = torch.where((labels == -1)[..., None], self.not_a_point_embed.weight.to(emb.dtype), emb)
        emb = emb + torch.where((labels == 0)[..., None], self.point_embeddings[0].weight, 0.0)
        emb = emb + torch.where((labels == 1)[..., None], self.point_embeddings[1].weight, 0.0)
        return emb

    def forward(self, batch: int, points=None, dense_prompt: torch.Tensor | None = None):
        """Return sparse tokens (N, P, D) and a dense embedding (N, D, h, w).

        Without points the learned padding token is the single sparse token;
        without a dense prompt the learned no-mask embedding is broadcast.
        """
        d, g = self.config.embed_dim, self.config.grid
        if points is None:
            sparse = self.not_a_point_embed.weight[None].expand(batch, 1, d)
        else:
            coords, labels = points
            sparse = self.embed_points(coords, labels)
        if dense_prompt is None:
            dense = self.no_mask_embed.weight.reshape(1, d, 1, 1).expand(batch, d, g, g)
        else:
            if dense_prompt.ndim != 4 or dense_prompt.shape[1] != self.config.num_structures:
                raise ShapeMismatch(
                    f"dense prompt must be (N, {self.config.num_structures}, H, W), got {tuple(dense_prompt.shape)}"
                )
            m = self.mask_input_size
            if tuple(dense_prompt.shape[-2:]) != (m, m):
                dense_prompt = F.interpolate(dense_prompt, size=(m, m), mode="bilinear", align_corners=False)
            dense = self.mask_downscaling(dense_prompt)
        return sparse, dense
