import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from echoone.errors import ShapeMismatch
from echoone.metrics import dice, hd95, inner_boundary, iou

from oracles import boundary_pixels, dice_oracle, hd95_oracle, iou_oracle


def mask_pairs(max_side=12):
    return st.tuples(st.integers(1, max_side), st.integers(1, max_side)).flatmap(
        lambda s: st.tuples(arrays(bool, s), arrays(bool, s))
    )


def test_dice_identity_and_disjoint():
    m = np.zeros((4, 4), bool)
    m[1:3, 1:3] = True
    assert dice(m, m) == 1.0
    other = np.zeros_like(m)
    other[0, 0] = True
    assert dice(m, other) == 0.0


def test_dice_half_overlap_on_4x4():
    p = np.zeros((4, 4), bool)
    t = np.zeros((4, 4), bool)
    p[0, :4] = True
    t[0, :2] = True
    t[1, :2] = True
    assert p.sum() == 4 and t.sum() == 4 and (p & t).sum() == 2
    assert dice(p, t) == 0.5


def test_iou_counts():
    p = np.zeros((4, 4), bool)
    t = np.zeros((4, 4), bool)
    p[0, :4] = True
    t[0, :2] = True
    t[1, :2] = True
    assert (p | t).sum() == 6
    assert iou(p, t) == pytest.approx(1 / 3, abs=1e-15)
    assert iou(p, p) == 1.0
    assert iou(p, ~p) == 0.0


def test_both_empty_convention():
    z = np.zeros((5, 5), bool)
    assert dice(z, z) == 1.0
    assert iou(z, z) == 1.0
    assert math.isnan(hd95(z, z))


def test_hd95_examples():
    m = np.zeros((6, 6), bool)
    m[2:4, 1:5] = True
    assert hd95(m, m) == 0.0
    a = np.zeros((1, 8), bool)
    b = np.zeros((1, 8), bool)
    a[0, 1] = True
    b[0, 4] = True
    assert hd95(a, b) == 3.0
    assert math.isnan(hd95(np.zeros_like(m), m))
    assert math.isnan(hd95(m, np.zeros_like(m)))


@pytest.mark.parametrize("fn", [dice, iou, hd95])
def test_shape_mismatch(fn):
    with pytest.raises(ShapeMismatch):
        fn(np.zeros((3, 3)), np.zeros((3, 4)))


def test_inner_boundary_matches_oracle(rng):
    for _ in range(50):
        m = rng.random((9, 7)) < 0.6
        expected = np.zeros_like(m)
        for r, c in boundary_pixels(m):
            expected[r, c] = True
        assert np.array_equal(inner_boundary(m), expected)


@given(mask_pairs())
def test_metrics_match_oracles(pair):
    p, t = pair
    assert abs(dice(p, t) - dice_oracle(p, t)) <= 1e-9
    assert abs(iou(p, t) - iou_oracle(p, t)) <= 1e-9
    h, ho = hd95(p, t), hd95_oracle(p, t)
    assert (math.isnan(h) and math.isnan(ho)) or abs(h - ho) <= 1e-9


@given(mask_pairs())
def test_symmetry_and_dice_iou_relation(pair):
    p, t = pair
    assert dice(p, t) == dice(t, p)
    assert iou(p, t) == iou(t, p)
    h1, h2 = hd95(p, t), hd95(t, p)
    assert (math.isnan(h1) and math.isnan(h2)) or h1 == pytest.approx(h2, abs=1e-12)
    d, j = dice(p, t), iou(p, t)
    assert d >= j
    assert d == pytest.approx(2 * j / (1 + j), abs=1e-12)
