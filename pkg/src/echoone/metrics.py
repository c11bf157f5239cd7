"""Overlap and boundary-distance metrics for binary masks.

Conventions: Dice and IoU are 1.0 when both masks are empty and 0.0 when only
one is. HD95 is the 95th percentile of the pooled directed nearest distances
between the two inner boundaries (4-connectivity, pixels outside the image
count as background); it is undefined (NaN) when either mask is empty.
"""

import numpy as np
from scipy import ndimage

from .errors import ShapeMismatch

_CROSS = ndimage.generate_binary_structure(2, 1)


def _pair(pred, target):
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(target, dtype=bool)
    if p.shape != t.shape:
        raise ShapeMismatch(f"pred {p.shape} and target {t.shape} differ")
    return p, t


def overlap_counts(pred, target):
    p, t = _pair(pred, target)
    inter = int(np.count_nonzero(p & t))
    return inter, int(np.count_nonzero(p)), int(np.count_nonzero(t))


def dice(pred, target) -> float:
    inter, np_, nt = overlap_counts(pred, target)
    if np_ + nt == 0:
        return 1.0
    return 2.0 * inter / (np_ + nt)


def iou(pred, target) -> float:
    inter, np_, nt = overlap_counts(pred, target)
    union = np_ + nt - inter
    if union == 0:
        return 1.0
    return inter / union


def inner_boundary(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(m, structure=_CROSS, border_value=0)
    return m & ~eroded


def surface_distances(pred, target) -> np.ndarray:
    """Directed boundary distances pred->target followed by target->pred."""
    p, t = _pair(pred, target)
    bp, bt = inner_boundary(p), inner_boundary(t)
    dt_to_t = ndimage.distance_transform_edt(~bt)
    dt_to_p = ndimage.distance_transform_edt(~bp)
    return np.concatenate([dt_to_t[bp], dt_to_p[bt]])


def hd95(pred, target) -> float:
    p, t = _pair(pred, target)
    if not p.any() or not t.any():
        return float("nan")
    return float(np.percentile(surface_distances(p, t), 95))


def mean_dice(pred_channels, target_channels) -> float:
    """Mean Dice over structure channels of (S, H, W) binary arrays."""
    return float(np.mean([dice(p, t) for p, t in zip(pred_channels, target_channels)]))
