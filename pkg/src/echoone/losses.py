"""Dice / BCE objectives shared by the segmentation head and the prompt generator."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import ShapeMismatch

DICE_SMOOTH = 1.0


def _check(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"prediction {tuple(a.shape)} and target {tuple(b.shape)} differ")
    if a.ndim < 3:
        raise ShapeMismatch(f"expected (S, H, W) or (N, S, H, W), got {tuple(a.shape)}")


def soft_dice_loss(probs: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """1 - soft Dice per (sample, channel), averaged. Spatial dims are the last two."""
    inter = (probs * target).sum(dim=(-2, -1))
    denom = probs.sum(dim=(-2, -1)) + target.sum(dim=(-2, -1))
    return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).mean()


def seg_loss_terms(logits, target, dice_weight: float = 0.8, bce_weight: float = 0.2) -> dict:
    _check(logits, target)
    dice = soft_dice_loss(torch.sigmoid(logits), target)
    bce = F.binary_cross_entropy_with_logits(logits, target)
    return {"dice": dice, "bce": bce, "total": dice_weight * dice + bce_weight * bce}


def seg_loss(logits, target, dice_weight: float = 0.8, bce_weight: float = 0.2) -> torch.Tensor:
    """Segmentation objective on raw logits: weighted soft-Dice plus BCE-with-logits."""
    return seg_loss_terms(logits, target, dice_weight, bce_weight)["total"]


def total_loss(seg, pcm, lam: float):
    return seg + lam * pcm
