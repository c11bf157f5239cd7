"""Training-time augmentation: rotation, scaling, contrast and gamma, each with
its own coin flip. Geometric ops move image and mask together (nearest-neighbour
for labels); photometric ops touch pixels only."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentConfig:
    prob: float = 0.5
    max_rotation_deg: float = 15.0
    scale_range: tuple = (0.9, 1.1)
    contrast_range: tuple = (0.8, 1.2)
    gamma_range: tuple = (0.8, 1.2)


@dataclass(frozen=True)
class AugmentParams:
    rotation_deg: float | None = None
    scale: float | None = None
    contrast: float | None = None
    gamma: float | None = None


def sample_params(rng: np.random.Generator, config: AugmentConfig = AugmentConfig()) -> AugmentParams:
    # always consume the same number of draws so streams stay aligned
    coins = rng.random(4) < config.prob
    rot = rng.uniform(-config.max_rotation_deg, config.max_rotation_deg)
    scale = rng.uniform(*config.scale_range)
    contrast = rng.uniform(*config.contrast_range)
    gamma = rng.uniform(*config.gamma_range)
    return AugmentParams(
        rot if coins[0] else None,
        scale if coins[1] else None,
        contrast if coins[2] else None,
        gamma if coins[3] else None,
    )


def _warp(arr: np.ndarray, rotation_deg: float, scale: float, order: int) -> np.ndarray:
    th = np.deg2rad(rotation_deg)
    forward = scale * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    inverse = np.linalg.inv(forward)
    center = (np.array(arr.shape, dtype=np.float64) - 1) / 2
    offset = center - inverse @ center
    return ndimage.affine_transform(arr, inverse, offset=offset, order=order, mode="constant", cval=0)


def apply_params(pixels: np.ndarray, mask: np.ndarray, params: AugmentParams) -> tuple[np.ndarray, np.ndarray]:
    pixels = np.asarray(pixels, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.uint8)
    if params.rotation_deg is not None or params.scale is not None:
        rot = params.rotation_deg or 0.0
        scale = params.scale or 1.0
        pixels = _warp(pixels, rot, scale, order=1).astype(np.float32)
        mask = _warp(mask, rot, scale, order=0).astype(np.uint8)
    if params.contrast is not None:
        mean = pixels.mean()
        pixels = (pixels - mean) * params.contrast + mean
    if params.gamma is not None:
        pixels = np.clip(pixels, 0.0, 1.0) ** params.gamma
    return np.clip(pixels, 0.0, 1.0).astype(np.float32), mask


def augment(pixels, mask, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()):
    return apply_params(pixels, mask, sample_params(rng, config))
