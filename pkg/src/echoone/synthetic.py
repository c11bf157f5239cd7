"""Synthetic multi-plane echo-like images for tests, demos and toy training.

Each plane family has its own geometry: apical views show an open myocardial
horseshoe around the LV cavity with a chamber blob past the basal opening,
PSAX shows a closed annulus. Shapes are jittered per sample and rendered with
speckle-like multiplicative noise.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import LV, LV_CAVITY, MYO, LabeledImage, Plane, write_mask_png, write_pixels_png

# (half-width, half-height, band thickness, rotation deg, opening cut, blob offset)
_GEOMETRY = {
    Plane.CH2: (0.20, 0.32, 0.07, 0.0, 0.10, (0.0, 0.0)),
    Plane.CH3: (0.18, 0.30, 0.06, -25.0, 0.12, (0.16, -0.02)),
    Plane.CH4: (0.24, 0.28, 0.08, 12.0, 0.06, (-0.05, 0.0)),
    Plane.PSAX: (0.22, 0.22, 0.08, 0.0, None, None),
}


def _grid(size):
    c = (np.arange(size) + 0.5) / size - 0.5
    return np.meshgrid(c, c, indexing="ij")


def synthetic_mask(plane, size: int = 64, rng=None, jitter: float = 1.0) -> np.ndarray:
    plane = Plane.parse(plane)
    rng = np.random.default_rng(rng)
    a, b, t, rot, cut, blob = _GEOMETRY[plane]
    j = jitter
    a *= 1 + j * rng.uniform(-0.1, 0.1)
    b *= 1 + j * rng.uniform(-0.1, 0.1)
    t *= 1 + j * rng.uniform(-0.1, 0.1)
    rot += j * rng.uniform(-6, 6)
    cy, cx = j * rng.uniform(-0.04, 0.04, size=2)
    yy, xx = _grid(size)
    th = np.deg2rad(rot)
    y = np.cos(th) * (yy - cy) - np.sin(th) * (xx - cx)
    x = np.sin(th) * (yy - cy) + np.cos(th) * (xx - cx)
    outer = (x / (a + t)) ** 2 + (y / (b + t)) ** 2 <= 1.0
    inner = (x / a) ** 2 + (y / b) ** 2 <= 1.0
    mask = np.zeros((size, size), dtype=np.uint8)
    if cut is None:
        mask[outer & ~inner] = MYO
        mask[inner] = LV_CAVITY
        return mask
    # apex up, basal opening at the bottom (+y)
    keep = y <= b * (1 - cut) * 0.8
    mask[outer & ~inner & keep] = MYO
    mask[inner & keep] = LV_CAVITY
    oy, ox = blob
    by = b * (1 - cut) * 0.8 + 0.13 + oy
    chamber = ((x - ox) / (0.8 * a)) ** 2 + ((y - by) / 0.11) ** 2 <= 1.0
    mask[chamber & (mask == 0) & (y > b * (1 - cut) * 0.8 + 0.01)] = LV
    return mask


def render(mask: np.ndarray, plane, rng=None, noise: float = 0.25) -> np.ndarray:
    """Echo-like intensities for a unified mask."""
    plane = Plane.parse(plane)
    rng = np.random.default_rng(rng)
    size = mask.shape[0]
    levels = {0: 0.30, LV: 0.12, LV_CAVITY: 0.08, MYO: 0.80}
    img = np.zeros(mask.shape, dtype=np.float64)
    for label, level in levels.items():
        img[mask == label] = level
    yy, xx = _grid(size)
    # plane-specific acquisition sector
    half_angle = 0.55 if plane is Plane.PSAX else 0.75
    ang = np.arctan2(xx, yy + 0.55)
    img *= np.where(np.abs(ang) <= half_angle, 1.0, 0.25)
    img = ndimage.gaussian_filter(img, sigma=max(size / 128.0, 0.5))
    img *= rng.gamma(1.0 / noise**2, noise**2, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_sample(plane, size: int = 64, rng=None, subject_id: str = "", dataset_id: str = "toy") -> LabeledImage:
    rng = np.random.default_rng(rng)
    mask = synthetic_mask(plane, size, rng)
    return LabeledImage(render(mask, plane, rng), mask, plane, subject_id, dataset_id)


def make_dataset(per_plane: int, size: int = 64, seed: int = 0, planes=tuple(Plane), dataset_id: str = "toy"):
    rng = np.random.default_rng(seed)
    images = []
    for i in range(per_plane):
        for plane in planes:
            sid = f"s{i:03d}"
            img = make_sample(plane, size, rng, sid, dataset_id)
            img.image_id = f"{dataset_id}/{sid}/{plane.value}"
            images.append(img)
    return images


def u_band(size: int = 64, outer=(6, 58), inner=(14, 50), top: int = 10, bottom=(54, 46)) -> np.ndarray:
    """Rectilinear U-shaped band opening upward: arms span columns
    ``outer[0]:inner[0]`` and ``inner[1]:outer[1]`` from row ``top`` down; the base
    spans rows ``bottom[1]:bottom[0]``.
    """
    m = np.zeros((size, size), dtype=bool)
    m[top:bottom[0], outer[0]:inner[0]] = True
    m[top:bottom[0], inner[1]:outer[1]] = True
    m[bottom[1]:bottom[0], outer[0]:outer[1]] = True
    return m


def annulus(size: int = 64, r_outer: float = 20, r_inner: float = 12, center=None) -> np.ndarray:
    cy, cx = center if center is not None else ((size - 1) / 2, (size - 1) / 2)
    yy, xx = np.mgrid[:size, :size]
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return (d2 <= r_outer**2) & (d2 >= r_inner**2)


# source-protocol label tables used by write_toy_source
FULL_PROTOCOL = {"name": "full", "labels": {LV_CAVITY: 1, MYO: 2, LV: 3}, "fill": False}
MYO_ONLY_PROTOCOL = {"name": "myo-only", "labels": {MYO: 7}, "fill": True}


def write_toy_source(
    root, datasets=None, subjects: int = 10, planes=tuple(Plane), size: int = 64, seed: int = 0
) -> Path:
    """Write a toy multi-dataset source tree in the harmonization input layout.

    ``datasets`` maps dataset id to a protocol dict (see FULL_PROTOCOL).
    """
    root = Path(root)
    datasets = datasets or {"alpha": FULL_PROTOCOL, "beta": MYO_ONLY_PROTOCOL}
    rng = np.random.default_rng(seed)
    for ds_id, proto in datasets.items():
        ds = root / ds_id
        ds.mkdir(parents=True, exist_ok=True)
        lines = [f"name={proto['name']}"]
        lines += [f"{src}={dst}" for dst, src in sorted(proto["labels"].items())]
        if proto.get("fill"):
            lines.append("fill_cavity=1")
        (ds / "remap.cfg").write_text("\n".join(lines) + "\n")
        for s in range(subjects):
            sid = f"subj{s:03d}"
            for plane in planes:
                mask = synthetic_mask(plane, size, rng)
                pixels = render(mask, plane, rng)
                raw = np.zeros_like(mask)
                for unified, src in proto["labels"].items():
                    raw[mask == unified] = src
                stem = f"{plane.value}_ED"
                write_pixels_png(ds / sid / f"{stem}.png", pixels)
                write_mask_png(ds / sid / f"{stem}_mask.png", raw)
    return root
