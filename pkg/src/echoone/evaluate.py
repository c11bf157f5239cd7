"""Per-image, per-structure metric records and their grouped aggregates."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import STRUCTURE_NAMES, STRUCTURES, LabeledImage, one_hot
from .metrics import dice, hd95, iou

CSV_COLUMNS = ("grouping", "mDice", "mIoU", "mHD95", "n", "hd95_excluded")


@dataclass(frozen=True)
class MetricRecord:
    image_id: str
    dataset_id: str
    plane: str
    structure: int
    dice: float
    iou: float
    hd95: float | None  # None when undefined

    @property
    def hd95_defined(self) -> bool:
        return self.hd95 is not None


@dataclass(frozen=True)
class Aggregate:
    mDice: float
    mIoU: float
    mHD95: float | None
    n: int
    hd95_excluded: int


def _mean(values) -> float | None:
    values = list(values)
    return float(np.mean(values)) if values else None


def aggregate(records: Sequence[MetricRecord]) -> Aggregate:
    defined = [r.hd95 for r in records if r.hd95_defined]
    return Aggregate(
        _mean(r.dice for r in records),
        _mean(r.iou for r in records),
        _mean(defined),
        len(records),
        len(records) - len(defined),
    )


def _equal_weight(groups: Iterable[Aggregate], n: int, excluded: int) -> Aggregate:
    groups = list(groups)
    hd = [g.mHD95 for g in groups if g.mHD95 is not None]
    return Aggregate(_mean(g.mDice for g in groups), _mean(g.mIoU for g in groups), _mean(hd), n, excluded)


def _group(records, key) -> dict:
    out: dict = {}
    for r in records:
        out.setdefault(key(r), []).append(r)
    return out


@dataclass
class EvalReport:
    """Records plus aggregates keyed by grouping name.

    Grouping names: ``all``, ``plane=<P>`` (dataset-equal weighting, the
    headline), ``plane_pooled=<P>``, ``dataset=<D>``, ``structure=<S>``,
    ``structure=<S>,plane=<P>``.
    """

    records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def aggregates(self) -> dict:
        recs = self.records
        if not recs:
            return {}
        out = {"all": aggregate(recs)}
        by_plane = _group(recs, lambda r: r.plane)
        for plane in sorted(by_plane):
            members = by_plane[plane]
            per_ds = _group(members, lambda r: r.dataset_id)
            pooled = aggregate(members)
            out[f"plane={plane}"] = _equal_weight(
                (aggregate(per_ds[d]) for d in sorted(per_ds)), pooled.n, pooled.hd95_excluded
            )
            out[f"plane_pooled={plane}"] = pooled
        for ds, members in sorted(_group(recs, lambda r: r.dataset_id).items()):
            out[f"dataset={ds}"] = aggregate(members)
        for s, members in sorted(_group(recs, lambda r: r.structure).items()):
            out[f"structure={STRUCTURE_NAMES[s]}"] = aggregate(members)
        for (s, plane), members in sorted(_group(recs, lambda r: (r.structure, r.plane)).items()):
            out[f"structure={STRUCTURE_NAMES[s]},plane={plane}"] = aggregate(members)
        return out

    def to_json(self) -> str:
        payload = {
            "meta": self.meta,
            "records": [asdict(r) for r in self.records],
            "aggregates": {k: asdict(v) for k, v in self.aggregates.items()},
        }
        return json.dumps(payload, sort_keys=True, indent=1, allow_nan=False) + "\n"

    def write(self, json_path, csv_path=None) -> None:
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(self.to_json())
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(CSV_COLUMNS)
                for key, agg in self.aggregates.items():
                    writer.writerow([key, _fmt(agg.mDice), _fmt(agg.mIoU), _fmt(agg.mHD95), agg.n, agg.hd95_excluded])

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        payload = json.loads(text)
        return cls([MetricRecord(**r) for r in payload["records"]], payload.get("meta", {}))

    def plane_table(self, pooled: bool = False) -> str:
        prefix = "plane_pooled=" if pooled else "plane="
        rows = [(k[len(prefix):], v) for k, v in self.aggregates.items() if k.startswith(prefix)]
        lines = [f"{'plane':<6} {'mDice':>7} {'mIoU':>7} {'HD95':>7} {'n':>5}"]
        for plane, agg in rows:
            hd = "n/a" if agg.mHD95 is None else f"{agg.mHD95:.2f}"
            lines.append(f"{plane:<6} {100 * agg.mDice:7.2f} {100 * agg.mIoU:7.2f} {hd:>7} {agg.n:5d}")
        return "\n".join(lines)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def image_records(image_id, dataset_id, plane, pred_labels, target_labels, structures=STRUCTURES) -> list[MetricRecord]:
    """One record per structure from two label maps (or (S, H, W) binary stacks)."""
    pred = np.asarray(pred_labels)
    target = np.asarray(target_labels)
    if pred.ndim == 2:
        pred = one_hot(pred, structures)
    if target.ndim == 2:
        target = one_hot(target, structures)
    out = []
    for s, p, t in zip(structures, pred > 0.5, target > 0.5):
        h = hd95(p, t)
        out.append(MetricRecord(image_id, dataset_id, str(plane), int(s), dice(p, t), iou(p, t),
                                None if math.isnan(h) else h))
    return out


Predictor = Callable[[Sequence[LabeledImage]], np.ndarray]


def evaluate(
    bundle,
    atlas,
    images: Sequence[LabeledImage],
    predictor: Predictor | None = None,
    batch_size: int = 8,
    meta: dict | None = None,
) -> EvalReport:
    """Score ``bundle`` on ``images``; ``predictor`` replaces the network when given.

    Images are evaluated at the bundle's input resolution. ``predictor`` maps a
    list of images to (N, S, H, W) probabilities.
    """
    report = EvalReport([], dict(meta or {}))
    if bundle is not None:
        bundle.check_lineage(atlas)
        size = bundle.config.input_size
        images = [img.resized(size) for img in images]
    if not images:
        return report
    for start in range(0, len(images), batch_size):
        batch = list(images[start:start + batch_size])
        probs = predictor(batch) if predictor is not None else bundle.predict(batch, atlas)
        for img, p in zip(batch, probs):
            report.records.extend(image_records(img.image_id, img.dataset_id, img.plane.value, p, img.mask))
    return report


def oracle_predictor(images: Sequence[LabeledImage]) -> np.ndarray:
    """Returns ground truth; a test hook for exercising the reporting path."""
    return np.stack([one_hot(img.mask, STRUCTURES) for img in images])
