import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from glam.exceptions import ValidationError
from glam.metrics import (
    AVERAGE,
    MetricRecord,
    aggregate,
    brute_force_surface_metrics,
    dice,
    extract_surface,
    hausdorff,
    mean_surface_distance,
    read_csv,
    write_csv,
)


def surface_oracle(mask):
    """Foreground pixels with a background 4-neighbour or on the border, by explicit loops."""
    h, w = mask.shape
    pts = set()
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            if r in (0, h - 1) or c in (0, w - 1):
                pts.add((r, c))
                continue
            if not (mask[r - 1, c] and mask[r + 1, c] and mask[r, c - 1] and mask[r, c + 1]):
                pts.add((r, c))
    return pts


def masks_from(points, shape):
    m = np.zeros(shape, np.uint8)
    for r, c in points:
        m[r, c] = 1
    return m


masks_16 = arrays(np.uint8, (16, 16), elements=st.integers(0, 1))


# -- dice -------------------------------------------------------------------


def test_dice_hand_cases():
    a = masks_from([(0, 0), (0, 1)], (2, 2))
    b = masks_from([(0, 1), (1, 1)], (2, 2))
    assert dice(a, b) == 0.5
    assert dice(a, a) == 1.0
    assert dice(a, masks_from([(1, 0)], (2, 2))) == 0.0
    empty = np.zeros((2, 2), np.uint8)
    assert dice(empty, empty) == 1.0
    assert dice(empty, a) == 0.0


def test_dice_shape_mismatch():
    with pytest.raises(ValidationError):
        dice(np.zeros((2, 2)), np.zeros((3, 3)))


@given(masks_16, masks_16)
def test_dice_set_arithmetic(a, b):
    pa = {tuple(p) for p in np.argwhere(a)}
    pb = {tuple(p) for p in np.argwhere(b)}
    expected = 1.0 if not pa and not pb else 2 * len(pa & pb) / (len(pa) + len(pb))
    assert dice(a, b) == expected
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0


# -- surfaces ---------------------------------------------------------------


def test_surface_single_pixel_and_empty():
    m = masks_from([(3, 4)], (8, 8))
    assert [tuple(p) for p in extract_surface(m)] == [(3, 4)]
    assert extract_surface(np.zeros((5, 5), np.uint8)).shape == (0, 2)


def test_surface_of_interior_square():
    m = np.zeros((10, 10), np.uint8)
    m[3:7, 3:7] = 1
    pts = {tuple(p) for p in extract_surface(m)}
    assert len(pts) == 12
    assert pts == surface_oracle(m)
    assert (4, 4) not in pts and (5, 5) not in pts


def test_surface_includes_image_border():
    m = np.ones((4, 4), np.uint8)
    assert len(extract_surface(m)) == 12


@given(masks_16)
def test_surface_matches_loop_oracle(m):
    assert {tuple(p) for p in extract_surface(m)} == surface_oracle(m)


# -- distances --------------------------------------------------------------


def test_hausdorff_345():
    a = masks_from([(0, 0)], (8, 8))
    b = masks_from([(3, 4)], (8, 8))
    assert hausdorff(a, b, 1.0) == 5.0
    assert mean_surface_distance(a, b, 1.0) == 5.0


def test_identity_is_zero():
    m = np.zeros((12, 12), np.uint8)
    m[2:9, 3:7] = 1
    assert hausdorff(m, m, 0.5) == 0.0
    assert mean_surface_distance(m, m, 0.5) == 0.0


def test_empty_fallback_is_diagonal():
    gt = np.zeros((512, 512), np.uint8)
    gt[100:120, 100:120] = 1
    empty = np.zeros_like(gt)
    expected = 512 * math.sqrt(2) * 0.5
    assert hausdorff(empty, gt, 0.5) == pytest.approx(expected, abs=1e-9)
    assert round(expected, 1) == 362.0
    assert mean_surface_distance(gt, empty, 0.5) == pytest.approx(expected, abs=1e-9)
    assert hausdorff(empty, empty, 0.5) == 0.0
    assert mean_surface_distance(empty, empty, 0.5) == 0.0


def test_spacing_mismatch_rejected():
    m = masks_from([(1, 1)], (4, 4))
    with pytest.raises(ValidationError, match="spacing"):
        hausdorff(m, m, 0.5, gt_spacing_um=0.25)
    with pytest.raises(ValidationError):
        mean_surface_distance(m, m, -1.0)


def _pairwise_oracle(a, b, spacing):
    sa, sb = surface_oracle(a), surface_oracle(b)
    if not sa and not sb:
        return 0.0, 0.0
    if not sa or not sb:
        d = math.hypot(*a.shape) * spacing
        return d, d
    da = [min(math.dist(p, q) for q in sb) for p in sa]
    db = [min(math.dist(q, p) for p in sa) for q in sb]
    return max(max(da), max(db)) * spacing, (sum(da) + sum(db)) / (len(da) + len(db)) * spacing


@settings(max_examples=150, deadline=None)
@given(masks_16, masks_16, st.sampled_from([0.25, 0.5, 1.0, 1.7]))
def test_distances_match_pairwise_oracle(a, b, spacing):
    hd, msd = _pairwise_oracle(a, b, spacing)
    assert hausdorff(a, b, spacing) == pytest.approx(hd, abs=1e-9)
    assert mean_surface_distance(a, b, spacing) == pytest.approx(msd, abs=1e-9)
    ref = brute_force_surface_metrics(a, b, spacing)
    assert ref == pytest.approx((hd, msd), abs=1e-9)


@settings(max_examples=150, deadline=None)
@given(masks_16, masks_16, st.floats(0.1, 10.0))
def test_distance_invariants(a, b, s):
    hd, msd = hausdorff(a, b), mean_surface_distance(a, b)
    assert hd == hausdorff(b, a) and msd == pytest.approx(mean_surface_distance(b, a), abs=1e-12)
    assert hd >= 0 and msd >= 0
    if a.any() and b.any():
        assert hd >= msd - 1e-12
    assert hausdorff(a, b, s) == pytest.approx(s * hd, rel=1e-12, abs=1e-12)
    assert mean_surface_distance(a, b, s) == pytest.approx(s * msd, rel=1e-12, abs=1e-12)


# -- aggregation and csv ----------------------------------------------------


def test_aggregate_class_means_and_average():
    per_patch = [(1, 1.0, 2.0, 1.0), (1, 0.5, 4.0, 3.0), (3, 0.2, 10.0, 5.0)]
    recs = aggregate(per_patch, ("GS", "HN", "ML"), "S", "M")
    assert [r.class_name for r in recs] == ["GS", "ML", AVERAGE]
    gs, ml, avg = recs
    assert (gs.dice, gs.hd_um, gs.msd_um, gs.n) == (0.75, 3.0, 2.0, 2)
    assert (ml.dice, ml.n) == (0.2, 1)
    assert avg.dice == pytest.approx((0.75 + 0.2) / 2)
    assert avg.hd_um == pytest.approx((3.0 + 10.0) / 2)


def test_csv_round_trip_and_order(tmp_path):
    recs = [
        MetricRecord("B", "GLAM", AVERAGE, 0.5, 1.0, 0.5, 3),
        MetricRecord("B", "GLAM", "HN", 0.5, 1.0, 0.5, 1),
        MetricRecord("A", "GLAM", "SS", 0.1, 2.0, 1.5, 2),
        MetricRecord("B", "GLAM", "GS", 1 / 3, 1.0, 0.5, 2),
    ]
    path = write_csv(recs, tmp_path / "m.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "scenario,method,class,n,dice,hd_um,msd_um"
    # groups keep their first-appearance order; classes follow class order, Average last
    assert [ln.split(",")[2] for ln in lines[1:]] == ["GS", "HN", AVERAGE, "SS"]
    back = read_csv(path)
    assert {(r.class_name, r.dice) for r in back} == {(r.class_name, r.dice) for r in recs}
