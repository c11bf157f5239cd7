"""Two-way transformer mask decoder extended with LFFA skip connections.

Block ``l`` (1-based) for ``l >= 2`` receives keys fused with CNN feature
``l - 1`` when LFFA is enabled. The blocks past the original ones learn their
own key position embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ShapeMismatch
from .common import MLP, Attention, LayerNorm2d, MLPBlock, to_tokens
from .config import ModelConfig
from .lffa import LFFA


@dataclass
class DecoderState:
    block_index: int
    keys: torch.Tensor
    queries: torch.Tensor
    fused: torch.Tensor | None = None


class TwoWayBlock(nn.Module):
    def __init__(self, dim, heads, mlp_dim, downsample_rate=2, skip_first_layer_pe=False):
        super().__init__()
        self.self_attn = Attention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_attn_token_to_image = Attention(dim, heads, downsample_rate)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLPBlock(dim, mlp_dim)
        self.norm3 = nn.LayerNorm(dim)
        self.norm4 = nn.LayerNorm(dim)
        self.cross_attn_image_to_token = Attention(dim, heads, downsample_rate)
        self.skip_first_layer_pe = skip_first_layer_pe

    def forward(self, queries, keys, query_pe, key_pe):
        if self.skip_first_layer_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)
        q, k = queries + query_pe, keys + key_pe
        queries = self.norm2(queries + self.cross_attn_token_to_image(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))
        q, k = queries + query_pe, keys + key_pe
        keys = self.norm4(keys + self.cross_attn_image_to_token(k, q, queries))
        return queries, keys


class MaskDecoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d, g, s = config.embed_dim, config.grid, config.num_structures
        n_orig = config.num_original_decoder_blocks
        mlp_dim = 4 * d
        self.mask_tokens = nn.Embedding(s, d)
        self.blocks = nn.ModuleList(
            TwoWayBlock(d, config.decoder_heads, mlp_dim, config.attention_downsample_rate, i == 0)
            for i in range(config.num_decoder_blocks)
        )
        self.added_pe = nn.ParameterList(
            nn.Parameter(0.02 * torch.randn(1, g * g, d)) for _ in range(config.num_decoder_blocks - n_orig)
        )
        # fusion points sit in front of the last four blocks
        self.lffa = nn.ModuleList(LFFA(c, d) for c in config.cnn_widths)
        self.final_attn_token_to_image = Attention(d, config.decoder_heads, config.attention_downsample_rate)
        self.norm_final = nn.LayerNorm(d)
        self.output_upscaling = nn.Sequential(
            nn.ConvTranspose2d(d, d // 4, 2, 2), LayerNorm2d(d // 4), nn.GELU(), nn.ConvTranspose2d(d // 4, d // 8, 2, 2), nn.GELU()
        )
        self.hypernetworks = nn.ModuleList(MLP(d, d, d // 8, 3) for _ in range(s))

    @property
    def fusion_start(self) -> int:
        """0-based index of the first block fed by a fusion point."""
        return self.config.num_decoder_blocks - len(self.lffa)

    def forward(
        self,
        image_embedding: torch.Tensor,
        image_pe: torch.Tensor,
        sparse: torch.Tensor,
        dense: torch.Tensor,
        cnn_features: list | None = None,
        states: list | None = None,
    ) -> torch.Tensor:
        """Low-resolution structure logits (N, S, 4h, 4w)."""
        if image_embedding.shape[-2:] != dense.shape[-2:]:
            raise ShapeMismatch(
                f"image embedding grid {tuple(image_embedding.shape[-2:])} != prompt grid {tuple(dense.shape[-2:])}"
            )
        n, d, h, w = image_embedding.shape
        fuse = self.config.lffa_enabled and cnn_features is not None
        if fuse and len(cnn_features) != len(self.lffa):
            raise ShapeMismatch(f"expected {len(self.lffa)} CNN features, got {len(cnn_features)}")
        tokens = torch.cat([self.mask_tokens.weight[None].expand(n, -1, -1), sparse], dim=1)
        keys = to_tokens(image_embedding + dense)
        key_pe = to_tokens(image_pe).expand(n, -1, -1)
        queries = tokens
        n_orig = self.config.num_original_decoder_blocks
        start = self.fusion_start
        for i, block in enumerate(self.blocks):
            fused = None
            if fuse and i >= start:
                fused = keys = self.lffa[i - start](cnn_features[i - start], keys, (h, w))
            pe = key_pe if i < n_orig else self.added_pe[i - n_orig]
            queries, keys = block(queries, keys, tokens, pe)
            if states is not None:
                states.append(DecoderState(i + 1, keys, queries, fused))
        q, k = queries + tokens, keys + key_pe
        queries = self.norm_final(queries + self.final_attn_token_to_image(q, k, keys))
        src = keys.transpose(1, 2).reshape(n, d, h, w)
        up = self.output_upscaling(src)
        s = self.config.num_structures
        hyper = torch.stack([mlp(queries[:, j]) for j, mlp in enumerate(self.hypernetworks)], dim=1)
        b, c, uh, uw = up.shape
        return (hyper @ up.reshape(b, c, uh * uw)).reshape(b, s, uh, uw)
