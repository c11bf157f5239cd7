import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage
from skimage.morphology import skeletonize

from echoone.data import LV_CAVITY, MYO, Plane, read_png
from echoone.errors import DegenerateShape, LayoutError, UnknownLabel
from echoone.harmonize import (
    DatasetManifest,
    RemapTable,
    build_manifest,
    detect_basal_landmarks,
    fill_cavity,
    harmonize_mask,
    harmonize_to_disk,
    inner_contour,
    remap_mask,
    split_subjects,
)
from echoone.synthetic import FULL_PROTOCOL, MYO_ONLY_PROTOCOL, annulus, synthetic_mask, u_band, write_toy_source

from oracles import flood_fill


def test_remap_examples():
    table = RemapTable("t", {5: 2, 7: 3})
    assert np.array_equal(remap_mask(np.zeros((8, 8), int), table), np.zeros((8, 8)))
    assert remap_mask(np.array([[5, 7], [0, 5]]), table).tolist() == [[2, 3], [0, 2]]
    with pytest.raises(UnknownLabel) as err:
        remap_mask(np.array([[9, 0]]), table)
    assert err.value.label == 9


def test_remap_table_file(tmp_path):
    cfg = tmp_path / "remap.cfg"
    cfg.write_text("name=camus\n# comment\n1=2\n2=3\n4=0\nfill_cavity=yes\n")
    table = RemapTable.from_file(cfg)
    assert table.name == "camus" and table.fill_cavity
    assert remap_mask(np.array([[1, 2, 4, 0]]), table).tolist() == [[2, 3, 0, 0]]
    cfg.write_text("1=9\n")
    with pytest.raises(ValueError):
        RemapTable.from_file(cfg)
    cfg.write_text("garbage\n")
    with pytest.raises(LayoutError):
        RemapTable.from_file(cfg)


@given(arrays(np.uint8, (6, 6), elements=st.integers(0, 3)))
def test_identity_remap_is_idempotent(mask):
    table = RemapTable.identity()
    once = remap_mask(mask, table)
    assert np.array_equal(once, mask)
    assert np.array_equal(remap_mask(once, table), once)


# -- landmarks and cavity ------------------------------------------------------


def _endpoint_oracle(skel):
    ends = []
    h, w = skel.shape
    for r in range(h):
        for c in range(w):
            if not skel[r, c]:
                continue
            n = sum(
                skel[r + dr, c + dc]
                for dr in (-1, 0, 1)
                for dc in (-1, 0, 1)
                if (dr or dc) and 0 <= r + dr < h and 0 <= c + dc < w
            )
            if n == 1:
                ends.append((r, c))
    return sorted(ends, key=lambda p: (p[1], p[0]))


def test_u_band_landmarks_are_topmost_inner_pixels():
    m = u_band()
    got = detect_basal_landmarks(m, Plane.CH4)
    assert list(got) == _endpoint_oracle(skeletonize(inner_contour(m)))
    # topmost inner-contour pixel of each arm
    contour = inner_contour(m)
    left = np.argwhere(contour[:, :32])
    right = np.argwhere(contour[:, 32:]) + [0, 32]
    top_left = min(map(tuple, left), key=lambda p: (p[0], -p[1]))
    top_right = min(map(tuple, right), key=lambda p: (p[0], p[1]))
    assert got == (top_left, top_right) == ((10, 13), (10, 50))


def test_landmark_errors():
    with pytest.raises(DegenerateShape):
        detect_basal_landmarks(annulus(), Plane.CH2)
    with pytest.raises(DegenerateShape):
        detect_basal_landmarks(np.zeros((16, 16), bool), Plane.CH2)
    with pytest.raises(DegenerateShape):
        fill_cavity(np.zeros((16, 16), bool), Plane.CH4)
    with pytest.raises(DegenerateShape):
        fill_cavity(np.zeros((16, 16), bool), Plane.PSAX)


def _on_segment(p, a, b):
    (y, x), (y0, x0), (y1, x1) = p, a, b
    cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)
    return cross == 0 and min(x0, x1) <= x <= max(x0, x1) and min(y0, y1) <= y <= max(y0, y1)


def _strictly_inside(p, poly):
    """Even-odd ray casting; points on an edge count as outside."""
    y, x = p
    inside = False
    for a, b in zip(poly, poly[1:] + poly[:1]):
        if _on_segment(p, a, b):
            return False
        (y0, x0), (y1, x1) = a, b
        if (y0 > y) != (y1 > y):
            xi = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            if x < xi:
                inside = not inside
    return inside


def test_u_band_cavity_matches_point_in_polygon():
    m = u_band()
    (r0, c0), (r1, c1) = detect_basal_landmarks(m, Plane.CH4)
    contour = inner_contour(m)
    bottom = np.argwhere(contour).max(0)[0]
    # closed inner contour: chord between landmarks, down each arm, along the base
    poly = [(r0, c0), (r1, c1), (bottom, c1), (bottom, c0)]
    expected = np.array([[_strictly_inside((r, c), poly) for c in range(64)] for r in range(64)])
    assert np.array_equal(fill_cavity(m, Plane.CH4), expected)


def test_annulus_cavity_is_flood_fill_and_disk_area():
    m = annulus(64, 20, 12)
    cavity = fill_cavity(m, Plane.PSAX)
    centroid = tuple(int(round(v)) for v in np.argwhere(cavity).mean(0))
    assert np.array_equal(cavity, flood_fill(~m, centroid))
    assert abs(cavity.sum() - np.pi * 12**2) <= 2 * np.pi * 12
    assert not (cavity & m).any()


@pytest.mark.parametrize("plane", list(Plane))
def test_cavity_never_overlaps_myocardium(plane):
    rng = np.random.default_rng(0)
    for _ in range(10):
        myo = synthetic_mask(plane, 64, rng) == MYO
        cavity = fill_cavity(myo, plane)
        assert cavity.any() and not (cavity & myo).any()


def test_harmonize_mask_fills_when_requested():
    truth = synthetic_mask(Plane.CH2, 64, np.random.default_rng(0))
    raw = np.where(truth == MYO, 7, 0)
    table = RemapTable("myo-only", {7: MYO}, fill_cavity=True)
    out = harmonize_mask(raw, table, Plane.CH2)
    cav, ref = out == LV_CAVITY, truth == LV_CAVITY
    assert (cav & ref).sum() / (cav | ref).sum() > 0.8
    assert np.array_equal(out == MYO, truth == MYO)


# -- manifests and splits --------------------------------------------------------


def test_split_sizes_for_ten_subjects():
    ids = [f"s{i}" for i in range(10)]
    for seed in (0, 1):
        a = split_subjects(ids, seed)
        counts = [sum(v == s for v in a.values()) for s in ("train", "val", "test")]
        assert counts == [8, 1, 1]
    assert split_subjects(ids, 0) == split_subjects(ids, 0)


@given(st.integers(0, 2**31 - 1), st.integers(1, 40))
def test_split_disjoint_and_complete(seed, n):
    ids = [f"s{i}" for i in range(n)]
    a = split_subjects(ids, seed, "ds")
    groups = [{k for k, v in a.items() if v == s} for s in ("train", "val", "test")]
    assert set().union(*groups) == set(ids)
    assert sum(len(g) for g in groups) == n


@pytest.fixture(scope="module")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("src")
    return write_toy_source(root, {"alpha": FULL_PROTOCOL, "beta": MYO_ONLY_PROTOCOL}, subjects=10, size=48)


def test_build_manifest_splits_by_subject(toy_root):
    train, val, test = build_manifest(toy_root, split_seed=0)
    assert (len(train), len(val), len(test)) == (64, 8, 8)
    subjects = [m.subjects for m in (train, val, test)]
    assert not (subjects[0] & subjects[1]) and not (subjects[0] & subjects[2]) and not (subjects[1] & subjects[2])
    again = build_manifest(toy_root, split_seed=0)
    assert [m.records for m in again] == [train.records, val.records, test.records]


def _hashes(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_harmonize_to_disk_is_deterministic(toy_root, tmp_path):
    for out in ("a", "b"):
        manifests, counts = harmonize_to_disk(build_manifest(toy_root, split_seed=3), tmp_path / out)
        for m in manifests:
            m.write(tmp_path / out / "manifests" / f"{m.split}.tsv")
    assert _hashes(tmp_path / "a") == _hashes(tmp_path / "b")
    assert counts[("beta", "PSAX")] == 10
    # myocardium-only annotations gain a synthesized cavity
    mask = read_png(next((tmp_path / "a" / "masks" / "beta").rglob("2CH_ED_mask.png")))
    assert (mask == LV_CAVITY).any()


def test_manifest_roundtrip(toy_root, tmp_path):
    train, _, _ = build_manifest(toy_root, split_seed=0)
    train.meta["run_config_hash"] = "abc"
    train.write(tmp_path / "m" / "train.tsv")
    back = DatasetManifest.read(tmp_path / "m" / "train.tsv")
    assert back.meta == {"run_config_hash": "abc"}
    assert [r.image_id for r in back] == [r.image_id for r in train]
    img = back.load_record(back.records[0])
    assert img.pixels.shape == (48, 48)


def test_layout_errors(tmp_path, toy_root):
    with pytest.raises(LayoutError):
        build_manifest(tmp_path / "missing")
    bad = tmp_path / "bad" / "ds" / "subj"
    bad.mkdir(parents=True)
    (bad.parent / "remap.cfg").write_text("1=1\n")
    (bad / "frame.png").write_bytes((toy_root / "alpha" / "subj000" / "2CH_ED.png").read_bytes())
    with pytest.raises(LayoutError):
        build_manifest(tmp_path / "bad")
    nocfg = tmp_path / "nocfg" / "gamma" / "subj"
    nocfg.mkdir(parents=True)
    with pytest.raises(LayoutError, match="gamma"):
        build_manifest(tmp_path / "nocfg")


def test_unknown_label_names_file(toy_root):
    table = RemapTable("partial", {1: 2})
    with pytest.raises(UnknownLabel) as err:
        build_manifest(toy_root, table)
    assert "_mask.png" in str(err.value)
