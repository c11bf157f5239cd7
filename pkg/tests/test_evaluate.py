import csv
import io
import math

import numpy as np
import pytest

from echoone.data import LabeledImage, Plane
from echoone.evaluate import CSV_COLUMNS, EvalReport, MetricRecord, evaluate, image_records, oracle_predictor
from echoone.synthetic import make_dataset


def _random_records(rng, n_images=12):
    recs = []
    for i in range(n_images):
        ds = ["a", "b", "c"][i % 3]
        plane = ["2CH", "4CH"][i % 2]
        for s in (1, 2, 3):
            d = float(rng.random())
            j = d / (2 - d)
            hd = None if rng.random() < 0.2 else float(rng.random() * 10)
            recs.append(MetricRecord(f"img{i}", ds, plane, s, d, j, hd))
    return recs


def _brute_mean(values):
    values = list(values)
    return sum(values) / len(values) if values else None


def test_aggregates_match_double_entry(rng):
    report = EvalReport(_random_records(rng))
    aggs = report.aggregates
    names = {1: "LV", 2: "LV-cavity", 3: "MYO"}
    groups = {"all": lambda r: True}
    for ds in "abc":
        groups[f"dataset={ds}"] = lambda r, ds=ds: r.dataset_id == ds
    for p in ("2CH", "4CH"):
        groups[f"plane_pooled={p}"] = lambda r, p=p: r.plane == p
        for s in (1, 2, 3):
            groups[f"structure={names[s]},plane={p}"] = lambda r, s=s, p=p: r.structure == s and r.plane == p
    for s in (1, 2, 3):
        groups[f"structure={names[s]}"] = lambda r, s=s: r.structure == s
    for key, pred in groups.items():
        members = [r for r in report.records if pred(r)]
        agg = aggs[key]
        assert agg.n == len(members)
        assert abs(agg.mDice - _brute_mean(r.dice for r in members)) <= 1e-9
        assert abs(agg.mIoU - _brute_mean(r.iou for r in members)) <= 1e-9
        hd = _brute_mean(r.hd95 for r in members if r.hd95 is not None)
        assert (hd is None and agg.mHD95 is None) or abs(agg.mHD95 - hd) <= 1e-9
        assert agg.hd95_excluded == sum(r.hd95 is None for r in members)
    # dataset-equal plane headline: mean over datasets of per-dataset means
    for p in ("2CH", "4CH"):
        per_ds = [_brute_mean(r.dice for r in report.records if r.plane == p and r.dataset_id == d) for d in "abc"]
        per_ds = [v for v in per_ds if v is not None]
        assert abs(aggs[f"plane={p}"].mDice - sum(per_ds) / len(per_ds)) <= 1e-9


def test_empty_report():
    report = EvalReport([])
    assert report.aggregates == {}
    assert evaluate(None, None, [], oracle_predictor).records == []


def test_perfect_prediction_report():
    imgs = make_dataset(1, size=32, seed=0, planes=(Plane.CH2,))
    report = evaluate(None, None, imgs, oracle_predictor)
    assert len(report.records) == 3
    for agg in report.aggregates.values():
        assert agg.mDice == 1.0 and agg.mIoU == 1.0 and agg.mHD95 == 0.0


def test_record_invariants(rng):
    for _ in range(20):
        pred = rng.integers(0, 4, (12, 12))
        target = rng.integers(0, 4, (12, 12))
        target[:3] = 0
        for r in image_records("x", "d", "2CH", pred, target):
            assert r.dice >= r.iou
            assert r.dice == pytest.approx(2 * r.iou / (1 + r.iou), abs=1e-12)
            p, t = (pred == r.structure).any(), (target == r.structure).any()
            assert (r.hd95 is None) == (not p or not t)


def test_empty_structure_excluded_from_hd95():
    target = np.zeros((8, 8), np.uint8)
    target[2:5, 2:5] = 3
    recs = image_records("x", "d", "PSAX", target, target)
    assert [r.hd95 for r in recs] == [None, None, 0.0]
    agg = EvalReport(recs).aggregates["all"]
    assert agg.hd95_excluded == 2 and agg.mHD95 == 0.0


def test_json_csv_output(rng, tmp_path):
    report = EvalReport(_random_records(rng), {"run_config_hash": "h"})
    report.write(tmp_path / "r.json", tmp_path / "r.csv")
    back = EvalReport.from_json((tmp_path / "r.json").read_text())
    assert back.records == report.records and back.meta == report.meta
    rows = list(csv.reader(io.StringIO((tmp_path / "r.csv").read_text())))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) - 1 == len(report.aggregates)
    first = dict(zip(CSV_COLUMNS, rows[1]))
    assert first["grouping"] == "all" and math.isclose(float(first["mDice"]), report.aggregates["all"].mDice)
    assert "mDice" in report.plane_table()
