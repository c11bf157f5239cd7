"""Annotation harmonization: label remapping, LV-cavity synthesis and subject splits.

Source datasets follow the directory layout::

    <root>/<dataset_id>/remap.cfg
    <root>/<dataset_id>/<subject_id>/<PLANE>_<frame>.png
    <root>/<dataset_id>/<subject_id>/<PLANE>_<frame>_mask.png

``remap.cfg`` holds ``src_label=unified_label`` lines. Two optional directives
are understood as well: ``name=<table name>`` and ``fill_cavity=1`` (synthesize
the LV cavity for myocardium-only annotations).
"""

from __future__ import annotations

import dataclasses
import logging
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage
from skimage.draw import line as draw_line
from skimage.morphology import convex_hull_image, skeletonize

from .data import (
    LV_CAVITY,
    MYO,
    UNIFIED_LABELS,
    LabeledImage,
    Plane,
    read_pixels,
    read_png,
    write_mask_png,
)
from .errors import DataError, DegenerateShape, EmptyCavity, LayoutError, UnknownLabel

log = logging.getLogger(__name__)

CROSS = ndimage.generate_binary_structure(2, 1)
SQUARE = ndimage.generate_binary_structure(2, 2)
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class RemapTable:
    name: str
    entries: Mapping[int, int]
    drop_labels: frozenset = frozenset()
    fill_cavity: bool = False

    def __post_init__(self):
        entries = {int(k): int(v) for k, v in dict(self.entries).items()}
        bad = {k: v for k, v in entries.items() if v not in UNIFIED_LABELS}
        if bad:
            raise ValueError(f"remap table {self.name!r} maps outside {{0,1,2,3}}: {bad}")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "drop_labels", frozenset(int(x) for x in self.drop_labels))

    @classmethod
    def identity(cls) -> "RemapTable":
        return cls("unified", {v: v for v in UNIFIED_LABELS})

    def lookup(self) -> np.ndarray:
        """256-entry lookup array; -1 marks labels the table does not cover."""
        lut = np.full(256, -1, dtype=np.int16)
        lut[0] = 0
        for src in self.drop_labels:
            lut[src] = 0
        for src, dst in self.entries.items():
            lut[src] = dst
        return lut

    @classmethod
    def from_file(cls, path) -> "RemapTable":
        path = Path(path)
        entries, drops = {}, set()
        name, fill = path.parent.name or "remap", False
        for lineno, raw in enumerate(path.read_text().splitlines(), 1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise LayoutError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in text.split("=", 1))
            if key == "name":
                name = value
            elif key == "fill_cavity":
                fill = value.lower() in ("1", "true", "yes", "on")
            else:
                try:
                    src, dst = int(key), int(value)
                except ValueError as exc:
                    raise LayoutError(f"{path}:{lineno}: non-integer label in {raw!r}") from exc
                if dst == 0 and src != 0:
                    drops.add(src)
                else:
                    entries[src] = dst
        return cls(name, entries, frozenset(drops), fill)


def remap_mask(raw_mask: np.ndarray, table: RemapTable) -> np.ndarray:
    raw = np.asarray(raw_mask)
    if raw.size == 0:
        return raw.astype(np.uint8)
    present = np.unique(raw)
    lut = table.lookup()
    for value in present:
        if value < 0 or value > 255 or lut[int(value)] < 0:
            raise UnknownLabel(int(value), table.name)
    return lut[raw.astype(np.intp)].astype(np.uint8)


def _largest_component(region: np.ndarray, structure=CROSS) -> np.ndarray:
    labels, n = ndimage.label(region, structure=structure)
    if n == 0:
        return np.zeros_like(region, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def _skeleton_endpoints(skel: np.ndarray) -> np.ndarray:
    counts = ndimage.convolve(skel.astype(np.uint8), np.ones((3, 3), np.uint8), mode="constant") - 1
    return np.argwhere(skel & (counts == 1))


def inner_contour(myo_mask: np.ndarray) -> np.ndarray:
    """Myocardium pixels 4-adjacent to the concavity enclosed by the band.

    The concavity is the largest 4-connected background component inside the
    band's convex hull.
    """
    myo = np.asarray(myo_mask, dtype=bool)
    concavity = _largest_component(convex_hull_image(myo) & ~myo)
    return myo & ndimage.binary_dilation(concavity, structure=CROSS)


def detect_basal_landmarks(myo_mask: np.ndarray, plane) -> tuple[tuple[int, int], tuple[int, int]]:
    """Endpoints of the inner myocardium contour of an open (apical-view) band.

    Returns two ``(row, col)`` pixels ordered by column.
    """
    plane = Plane.parse(plane)
    if not plane.is_apical:
        raise DegenerateShape("basal landmarks are only defined for apical planes (2CH/3CH/4CH)")
    myo = np.asarray(myo_mask, dtype=bool)
    if not myo.any():
        raise DegenerateShape("empty myocardium mask")
    concavity = _largest_component(convex_hull_image(myo) & ~myo)
    if not concavity.any():
        raise DegenerateShape("myocardium band encloses no concavity")
    if not (concavity & ~ndimage.binary_fill_holes(myo, structure=CROSS)).any():
        raise DegenerateShape("inner contour is closed; no basal opening")
    contour = myo & ndimage.binary_dilation(concavity, structure=CROSS)
    ends = _skeleton_endpoints(skeletonize(contour))
    if len(ends) < 2:
        raise DegenerateShape("inner contour has no endpoints")
    if len(ends) > 2:
        d2 = ((ends[:, None, :] - ends[None, :, :]) ** 2).sum(-1)
        i, j = np.unravel_index(int(np.argmax(d2)), d2.shape)
        ends = ends[[i, j]]
    a, b = (tuple(int(v) for v in p) for p in ends)
    return tuple(sorted((a, b), key=lambda p: (p[1], p[0])))


def fill_cavity(myo_mask: np.ndarray, plane) -> np.ndarray:
    """Region enclosed by the inner myocardium contour.

    Apical bands are closed with a straight chord between the basal landmarks;
    the chord pixels stay background. PSAX annuli are filled directly.
    """
    plane = Plane.parse(plane)
    myo = np.asarray(myo_mask, dtype=bool)
    if not myo.any():
        raise DegenerateShape("empty myocardium mask")
    if plane.is_apical:
        (r0, c0), (r1, c1) = detect_basal_landmarks(myo, plane)
        barrier = myo.copy()
        rr, cc = draw_line(r0, c0, r1, c1)
        barrier[rr, cc] = True
    else:
        barrier = myo
    enclosed = ndimage.binary_fill_holes(barrier, structure=CROSS) & ~barrier
    cavity = _largest_component(enclosed)
    if not cavity.any():
        raise EmptyCavity(f"no enclosed cavity for plane {plane}")
    return cavity


def harmonize_mask(raw_mask: np.ndarray, table: RemapTable, plane) -> np.ndarray:
    mask = remap_mask(raw_mask, table)
    if table.fill_cavity and (mask == MYO).any() and not (mask == LV_CAVITY).any():
        cavity = fill_cavity(mask == MYO, plane)
        mask = mask.copy()
        mask[cavity & (mask == 0)] = LV_CAVITY
    return mask


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    mask_path: str
    plane: Plane
    subject_id: str
    dataset_id: str

    def to_line(self) -> str:
        return "\t".join((self.image_path, self.mask_path, self.plane.value, self.subject_id, self.dataset_id))

    @classmethod
    def from_line(cls, line: str) -> "ManifestRecord":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 5:
            raise LayoutError(f"manifest line needs 5 tab-separated fields, got {len(parts)}")
        return cls(parts[0], parts[1], Plane.parse(parts[2]), parts[3], parts[4])

    @property
    def image_id(self) -> str:
        return f"{self.dataset_id}/{self.subject_id}/{Path(self.image_path).stem}"


@dataclass
class DatasetManifest:
    records: list
    split: str = "train"
    # per-dataset tables for records whose masks are still in source labels
    tables: dict = field(default_factory=dict)
    # provenance written as "# key=value" header lines
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def subjects(self) -> set:
        return {(r.dataset_id, r.subject_id) for r in self.records}

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = "".join(f"# {k}={v}\n" for k, v in sorted(self.meta.items()))
        base = path.parent.resolve()
        # paths are stored relative to the manifest so trees can be moved
        records = [
            dataclasses.replace(
                r,
                image_path=os.path.relpath(Path(r.image_path).resolve(), base),
                mask_path=os.path.relpath(Path(r.mask_path).resolve(), base),
            )
            for r in self.records
        ]
        path.write_text(header + "".join(r.to_line() + "\n" for r in records))

    @classmethod
    def read(cls, path, split: str | None = None) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise LayoutError(f"manifest not found: {path}")
        records, meta = [], {}
        for line in path.read_text().splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
            elif line.strip():
                rec = ManifestRecord.from_line(line)
                records.append(dataclasses.replace(
                    rec,
                    image_path=str(path.parent / rec.image_path),
                    mask_path=str(path.parent / rec.mask_path),
                ))
        return cls(records, split or path.stem, meta=meta)

    def load_record(self, record: ManifestRecord, size: int | None = None) -> LabeledImage:
        pixels = read_pixels(record.image_path)
        raw = read_png(record.mask_path)
        table = self.tables.get(record.dataset_id)
        mask = harmonize_mask(raw, table, record.plane) if table else raw
        img = LabeledImage(
            pixels, mask, record.plane, record.subject_id, record.dataset_id,
            table.name if table else "unified", record.image_id,
        )
        return img.resized(size) if size else img

    def load_images(self, size: int | None = None, errors: list | None = None) -> list[LabeledImage]:
        """Load every record; unreadable samples are skipped and appended to ``errors``."""
        out = []
        for record in self.records:
            try:
                img = self.load_record(record, size)
                img.validate()
            except (DataError, UnknownLabel) as exc:
                if errors is None:
                    raise
                log.warning("skipping %s: %s", record.image_path, exc)
                errors.append((record.image_path, str(exc)))
                continue
            out.append(img)
        return out


def _frame_plane(stem: str, path: Path) -> Plane:
    tag = stem.split("_", 1)[0]
    try:
        return Plane.parse(tag)
    except ValueError as exc:
        raise LayoutError(f"{path}: frame name must start with a plane tag (2CH/3CH/4CH/PSAX*)") from exc


def scan_dataset(dataset_dir: Path) -> list[ManifestRecord]:
    if not dataset_dir.is_dir():
        raise LayoutError(f"not a dataset directory: {dataset_dir}")
    records = []
    for subject_dir in sorted(p for p in dataset_dir.iterdir() if p.is_dir()):
        frames = sorted(p for p in subject_dir.glob("*.png") if not p.stem.endswith("_mask"))
        for frame in frames:
            mask = frame.with_name(frame.stem + "_mask.png")
            if not mask.exists():
                raise LayoutError(f"{frame}: missing sibling mask {mask.name}")
            records.append(
                ManifestRecord(str(frame), str(mask), _frame_plane(frame.stem, frame), subject_dir.name, dataset_dir.name)
            )
    if not records:
        raise LayoutError(f"{dataset_dir}: no <subject>/<frame>.png files found")
    return records


def split_subjects(subject_ids: Iterable[str], seed: int, key: str = "") -> dict[str, str]:
    """Assign each subject to train/val/test with 80/10/10 proportions."""
    subjects = sorted(set(subject_ids))
    rng = np.random.default_rng([int(seed), zlib.crc32(key.encode())])
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    n = len(order)
    n_train = int(np.floor(SPLIT_FRACTIONS[0] * n + 0.5))
    n_val = min(n - n_train, int(np.floor(SPLIT_FRACTIONS[1] * n + 0.5)))
    assignment = {}
    for i, sid in enumerate(order):
        assignment[sid] = "train" if i < n_train else "val" if i < n_train + n_val else "test"
    return assignment


def dataset_dirs(dataset_root) -> list[Path]:
    root = Path(dataset_root)
    if not root.is_dir():
        raise LayoutError(f"dataset root does not exist: {root}")
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise LayoutError(f"{root}: no dataset directories")
    return dirs


def build_manifest(
    dataset_root, table: RemapTable | None = None, split_seed: int = 0, validate: bool = True
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Scan a dataset root and split every dataset by subject.

    When ``table`` is None each dataset's own ``remap.cfg`` is used.
    """
    by_split = {s: [] for s in SPLITS}
    tables = {}
    for ds_dir in dataset_dirs(dataset_root):
        if table is None:
            cfg = ds_dir / "remap.cfg"
            if not cfg.exists():
                raise LayoutError(f"dataset {ds_dir.name!r}: missing remap.cfg")
            tables[ds_dir.name] = RemapTable.from_file(cfg)
        else:
            tables[ds_dir.name] = table
        records = scan_dataset(ds_dir)
        if validate:
            for rec in records:
                try:
                    remap_mask(read_png(rec.mask_path), tables[ds_dir.name])
                except UnknownLabel as exc:
                    raise UnknownLabel(exc.label, rec.mask_path) from None
        assignment = split_subjects((r.subject_id for r in records), split_seed, ds_dir.name)
        for rec in records:
            by_split[assignment[rec.subject_id]].append(rec)
    return tuple(DatasetManifest(by_split[s], s, dict(tables)) for s in SPLITS)


def harmonize_to_disk(
    manifests: Sequence[DatasetManifest], out_dir
) -> tuple[list[DatasetManifest], dict]:
    """Write unified masks under ``out_dir/masks`` and return manifests pointing at them.

    Returns the rewritten manifests and a per-(dataset, plane) image count table.
    Cavity synthesis failures are logged and leave the mask without a cavity.
    """
    out_dir = Path(out_dir)
    result, counts = [], {}
    for manifest in manifests:
        records = []
        for rec in manifest.records:
            table = manifest.tables.get(rec.dataset_id) or RemapTable.identity()
            raw = read_png(rec.mask_path)
            try:
                mask = harmonize_mask(raw, table, rec.plane)
            except (DegenerateShape, EmptyCavity) as exc:
                log.warning("%s: cavity synthesis failed (%s); keeping remapped mask", rec.mask_path, exc)
                mask = remap_mask(raw, table)
            dest = out_dir / "masks" / rec.dataset_id / rec.subject_id / Path(rec.mask_path).name
            write_mask_png(dest, mask)
            records.append(ManifestRecord(rec.image_path, str(dest), rec.plane, rec.subject_id, rec.dataset_id))
            key = (rec.dataset_id, rec.plane.value)
            counts[key] = counts.get(key, 0) + 1
        result.append(DatasetManifest(records, manifest.split, meta=dict(manifest.meta)))
    return result, counts
