"""Core sample type, plane tags and image I/O."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, ShapeMismatch

BACKGROUND, LV, LV_CAVITY, MYO = 0, 1, 2, 3
UNIFIED_LABELS = (BACKGROUND, LV, LV_CAVITY, MYO)
STRUCTURES = (LV, LV_CAVITY, MYO)
STRUCTURE_NAMES = {LV: "LV", LV_CAVITY: "LV-cavity", MYO: "MYO"}


class Plane(str, enum.Enum):
    CH2 = "2CH"
    CH3 = "3CH"
    CH4 = "4CH"
    PSAX = "PSAX"

    @classmethod
    def parse(cls, value) -> "Plane":
        if isinstance(value, Plane):
            return value
        text = str(value).strip().upper()
        # PSAX-B / PSAX-M / PSAX-A collapse into one class
        if text.startswith("PSAX"):
            return cls.PSAX
        for plane in cls:
            if plane.value == text:
                return plane
        raise ValueError(f"unknown plane tag {value!r}")

    @property
    def is_apical(self) -> bool:
        return self is not Plane.PSAX

    def __str__(self):
        return self.value


PLANES = tuple(Plane)


@dataclass
class LabeledImage:
    pixels: np.ndarray
    mask: np.ndarray
    plane: Plane
    subject_id: str = ""
    dataset_id: str = ""
    source_protocol: str = "unified"
    image_id: str = field(default="")

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        self.mask = np.asarray(self.mask).astype(np.uint8, copy=False)
        self.plane = Plane.parse(self.plane)
        if self.pixels.ndim != 2 or self.pixels.shape != self.mask.shape:
            raise ShapeMismatch(f"pixels {self.pixels.shape} and mask {self.mask.shape} must be equal 2-D shapes")
        if self.mask.size and self.mask.max() > MYO:
            raise DataError(f"mask values must lie in {{0,1,2,3}}, found {int(self.mask.max())}")
        if not self.image_id:
            self.image_id = "/".join(p for p in (self.dataset_id, self.subject_id) if p) or "image"

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def validate(self) -> None:
        if not np.all(np.isfinite(self.pixels)):
            raise DataError(f"{self.image_id}: non-finite pixel values")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise DataError(f"{self.image_id}: pixels outside [0, 1]")

    def resized(self, size: int) -> "LabeledImage":
        if self.shape == (size, size):
            return self
        return LabeledImage(
            resize_image(self.pixels, size),
            resize_mask(self.mask, size),
            self.plane,
            self.subject_id,
            self.dataset_id,
            self.source_protocol,
            self.image_id,
        )


def one_hot(mask: np.ndarray, structures=STRUCTURES) -> np.ndarray:
    """(H, W) integer labels to (S, H, W) float32 channels, background dropped."""
    return np.stack([(mask == s) for s in structures]).astype(np.float32)


def labels_from_channels(binary: np.ndarray, structures=STRUCTURES) -> np.ndarray:
    """Collapse (S, H, W) binary predictions into one label map.

    Later structures overwrite earlier ones where predictions overlap.
    """
    out = np.zeros(binary.shape[1:], dtype=np.uint8)
    for channel, label in zip(binary, structures):
        out[np.asarray(channel, dtype=bool)] = label
    return out


def resize_image(pixels: np.ndarray, size: int) -> np.ndarray:
    img = Image.fromarray(np.asarray(pixels, dtype=np.float32), mode="F")
    return np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float32).clip(0.0, 1.0)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    img = Image.fromarray(np.asarray(mask, dtype=np.uint8))
    return np.asarray(img.resize((size, size), Image.NEAREST), dtype=np.uint8)


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("L", "I", "I;16", "P"):
                img = img.convert("L")
            return np.asarray(img)
    except (OSError, SyntaxError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def read_pixels(path) -> np.ndarray:
    """Read a grayscale image and normalize intensities to [0, 1]."""
    raw = read_png(path)
    if raw.ndim != 2:
        raise DataError(f"{path}: expected a single-channel image, got shape {raw.shape}")
    raw = raw.astype(np.float32)
    scale = 65535.0 if raw.max() > 255 else 255.0
    return raw / scale


def write_mask_png(path, mask: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path, optimize=False)


def write_pixels_png(path, pixels: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, optimize=False)
