"""Promptable segmentation network and its stage-level entry points."""

from __future__ import annotations

import torch

from ..errors import ShapeError
from .cnn_branch import CnnBranch, CrossBranchAttention
from .config import ModelConfig
from .lffa import LFFA, lffa_fuse
from .mask_decoder import DecoderState, MaskDecoder
from .model import EchoONE

__all__ = [
    "CnnBranch",
    "CrossBranchAttention",
    "DecoderState",
    "EchoONE",
    "LFFA",
    "MaskDecoder",
    "ModelConfig",
    "decode",
    "encode_image",
    "lffa_fuse",
    "run_cnn_branch",
]


def _batched(pixels) -> torch.Tensor:
    x = torch.as_tensor(pixels)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4:
        raise ShapeError(f"cannot interpret pixels of shape {tuple(x.shape)}")
    return x


def encode_image(model: EchoONE, pixels, cnn_features=None) -> torch.Tensor:
    """Image embedding (N, D, h, w); tuned by ``cnn_features`` when given."""
    return model.embed(_batched(pixels).to(next(model.parameters()).dtype), cnn_features)


def run_cnn_branch(model: EchoONE, pixels, encoder_intermediates=None):
    """Local CNN features plus, when intermediates are given, their refined versions.

    Returns ``(features, refined)`` where ``refined[k]`` is the k-th designated
    encoder intermediate after cross-branch attention (None without intermediates).
    """
    x = _batched(pixels).to(next(model.parameters()).dtype)
    features = model.cnn_branch(x)
    refined = None
    if encoder_intermediates is not None:
        if len(encoder_intermediates) != len(features):
            raise ShapeError(f"expected {len(features)} encoder intermediates, got {len(encoder_intermediates)}")
        refined = [model.cnn_branch.tune(k, t, features) for k, t in enumerate(encoder_intermediates)]
    return features, refined


def decode(model: EchoONE, image_embedding, dense_prompt=None, sparse_tokens=None, cnn_features=None, states=None):
    """Structure logits at input resolution from precomputed encoder outputs."""
    n = image_embedding.shape[0]
    sparse, dense = model.prompt_encoder(n, None, dense_prompt if model.config.pcmask_enabled else None)
    if sparse_tokens is not None:
        sparse = sparse_tokens
    low = model.mask_decoder(image_embedding, model.prompt_encoder.get_dense_pe(), sparse, dense, cnn_features, states)
    size = model.config.input_size
    return torch.nn.functional.interpolate(low, size=(size, size), mode="bilinear", align_corners=False)
