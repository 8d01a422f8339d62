import json
from itertools import permutations
from xml.etree import ElementTree

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial import ConvexHull, QhullError

from apl.errors import DegenerateLabelsError, DegeneratePolygonError, DimensionMismatchError, OutOfExtentError
from apl.evaluation import (
    NEGATIVE,
    POSITIVE,
    UNLABELED,
    PolygonAnnotation,
    majority_vote_masks,
    mask_metrics,
    pairwise_auc,
    polygons_to_mask,
    rasterize_point_labels,
    roc_auc,
    roc_svg,
    threshold_prediction,
)
from apl.inference import PredictionMap
from apl.raster import Extent, SegmentationMask
from apl.weak import PointLabel


def pts(*rows):
    return [PointLabel("a", x, y, c) for x, y, c in rows]


def test_rasterize_examples():
    r = rasterize_point_labels(
        pts((5, 5, "palm"),
            (15, 5, "palm"), (16, 5, "palm"), (17, 5, "palm"), (18, 5, "x"), (19, 5, "x"),
            (25, 5, "palm"), (26, 5, "x"),
            (5, 15, "x"), (6, 15, "x"), (7, 15, "palm")),
        10, Extent(0, 0, 30, 20), "palm")
    assert r.states.tolist() == [[POSITIVE, POSITIVE, POSITIVE], [NEGATIVE, UNLABELED, UNLABELED]]
    assert r.counts.tolist() == [[1, 5, 2], [3, 0, 0]]
    tie = rasterize_point_labels(pts((25, 5, "palm"), (26, 5, "x")), 10, Extent(0, 0, 30, 20), "palm",
                                 tie_positive=False)
    assert tie.states[0, 2] == NEGATIVE


def test_rasterize_errors():
    with pytest.raises(DimensionMismatchError):
        rasterize_point_labels([], 7, Extent(0, 0, 30, 20), "palm")
    with pytest.raises(OutOfExtentError):
        rasterize_point_labels(pts((31, 0, "palm")), 10, Extent(0, 0, 30, 20), "palm")


@given(st.lists(st.tuples(st.floats(0, 60), st.floats(0, 40), st.sampled_from(["palm", "x", "y"])), max_size=60))
def test_rasterize_conserves_counts(rows):
    r = rasterize_point_labels(pts(*rows), 20, Extent(0, 0, 60, 40), "palm")
    assert r.counts.sum() == len(rows)
    assert np.array_equal(r.labeled, r.counts > 0)


def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).auc == 1.0
    assert roc_auc([0.4] * 6, [1, 0, 1, 0, 0, 1]).auc == 0.5
    assert roc_auc([0.9, 0.6, 0.4], [1, 0, 1]).auc == pytest.approx(0.5)
    with pytest.raises(DegenerateLabelsError):
        roc_auc([0.1, 0.2], [1, 1])


def test_auc_excludes_unlabeled():
    c = roc_auc([0.9, 0.1, 0.95, 0.2], [1, 0, 0, 1], unlabeled=[False, False, True, True])
    assert c.auc == 1.0


@given(st.lists(st.tuples(st.integers(0, 20), st.booleans()), min_size=2, max_size=200))
def test_trapezoid_equals_pair_count(rows):
    s = np.array([r[0] / 20 for r in rows])
    y = np.array([r[1] for r in rows])
    if y.all() or not y.any():
        return
    curve = roc_auc(s, y)
    pos, neg = s[y], s[~y]
    pairs = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    assert curve.auc == pytest.approx(pairs / (len(pos) * len(neg)), abs=1e-9)
    assert pairwise_auc(s, y) == pytest.approx(curve.auc, abs=1e-9)
    assert (curve.fpr[0], curve.tpr[0]) == (0.0, 0.0)
    assert (curve.fpr[-1], curve.tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)
    assert np.all(np.diff(curve.thresholds) < 0)


def test_polygon_examples():
    ext = Extent(0, 0, 12, 8)
    assert polygons_to_mask(PolygonAnnotation("a", (((0, 0), (12, 0), (12, 8), (0, 8)),)), ext).data.all()
    with pytest.raises(DegeneratePolygonError):
        polygons_to_mask([((0, 0), (3, 3))], ext)
    # the right edge passes through the pixel centres at x = 1.5
    m = polygons_to_mask([((0, 0), (1.5, 0), (1.5, 8), (0, 8))], ext).data
    assert m[:, :2].all() and not m[:, 2:].any()


@pytest.mark.parametrize("a,b", [(10, 10), (37, 11), (50, 80), (3, 64)])
def test_right_triangle_area(a, b):
    m = polygons_to_mask([((0, 0), (a, 0), (0, b))], Extent(0, 0, 100, 100)).data
    assert abs(int(m.sum()) - a * b / 2) <= a + b + 2


def test_even_odd_self_overlap():
    # a pentagram: the centre region is crossed twice and stays empty
    angles = np.pi / 2 + np.arange(5) * 4 * np.pi / 5
    star = [(50 + 40 * np.cos(t), 50 - 40 * np.sin(t)) for t in angles]
    m = polygons_to_mask([star], Extent(0, 0, 100, 100)).data
    assert m[50, 50] == 0 and m[20, 50] == 1


def _half_plane_inside(hull_pts, px, py):
    n = len(hull_pts)
    ok = np.ones(px.shape, dtype=bool)
    for k in range(n):
        (x1, y1), (x2, y2) = hull_pts[k], hull_pts[(k + 1) % n]
        ok &= (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1) >= 0
    return ok


@given(st.lists(st.tuples(st.integers(0, 40), st.integers(0, 40)), min_size=3, max_size=12))
def test_convex_polygons_match_half_plane_oracle(raw):
    vertices = np.array(raw, dtype=float) / 2  # half-pixel lattice hits centres exactly
    try:
        hull = ConvexHull(vertices)
    except QhullError:
        return
    ring = vertices[hull.vertices]  # counter-clockwise
    m = polygons_to_mask([ring.tolist()], Extent(0, 0, 22, 22)).data
    py, px = np.mgrid[0:22, 0:22] + 0.5
    assert np.array_equal(m.astype(bool), _half_plane_inside(ring, px, py))


def test_polygon_json(tmp_path):
    (tmp_path / "p.json").write_text(json.dumps({"image_id": "a", "polygons": [[[0, 0], [4, 0], [4, 4]]]}))
    ann = PolygonAnnotation.load(tmp_path / "p.json")
    assert ann.image_id == "a" and ann.polygons == (((0.0, 0.0), (4.0, 0.0), (4.0, 4.0)),)


def masks(*rows):
    return [SegmentationMask(np.array(r, dtype=np.uint8)) for r in rows]


def test_majority_vote_examples():
    m = masks([[1, 0, 1]])[0]
    assert np.array_equal(majority_vote_masks([m] * 5).data, m.data)
    five = masks([[1, 1]], [[1, 0]], [[1, 0]], [[0, 0]], [[0, 0]])
    assert majority_vote_masks(five).data.tolist() == [[1, 0]]
    four = masks([[1]], [[1]], [[0]], [[0]])
    assert majority_vote_masks(four).data.tolist() == [[1]]
    assert majority_vote_masks(four, tie_value=0).data.tolist() == [[0]]
    with pytest.raises(ValueError):
        majority_vote_masks([])
    with pytest.raises(DimensionMismatchError):
        majority_vote_masks(masks([[1]], [[1, 0]]))


@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_majority_vote_permutation_invariant(seed, n):
    r = np.random.default_rng(seed)
    ms = [SegmentationMask(r.integers(0, 2, (4, 5)).astype(np.uint8)) for _ in range(n)]
    base = majority_vote_masks(ms).data
    for perm in permutations(range(n)):
        assert np.array_equal(majority_vote_masks([ms[i] for i in perm]).data, base)


def test_mask_metric_examples():
    a = SegmentationMask(np.array([[1, 0], [0, 1]], dtype=np.uint8))
    assert mask_metrics(a, a) == (1.0, 1.0)
    b = SegmentationMask(1 - a.data)
    assert mask_metrics(a, b)[1] == 0.0
    left = np.zeros((4, 6), dtype=np.uint8)
    left[:, :3] = 1
    assert mask_metrics(SegmentationMask(left), SegmentationMask(np.ones((4, 6), np.uint8))) == (0.5, 0.5)
    empty = SegmentationMask(np.zeros((3, 3), np.uint8))
    assert mask_metrics(empty, empty) == (1.0, 1.0)
    with pytest.raises(DimensionMismatchError):
        mask_metrics(empty, a)


def test_mask_metrics_region():
    p = SegmentationMask(np.array([[1, 1], [0, 0]], dtype=np.uint8))
    r = SegmentationMask(np.array([[1, 0], [0, 1]], dtype=np.uint8))
    assert mask_metrics(p, r, region=np.array([[True, False], [True, False]])) == (1.0, 1.0)


@given(st.integers(0, 2**31 - 1))
def test_mask_metric_invariants(seed):
    r = np.random.default_rng(seed)
    p = SegmentationMask(r.integers(0, 2, (6, 7)).astype(np.uint8))
    q = SegmentationMask((r.random((6, 7)) < r.random()).astype(np.uint8))
    acc, iou = mask_metrics(p, q)
    assert 0 <= acc <= 1 and 0 <= iou <= 1
    if iou == 1:
        assert acc == 1
    assert mask_metrics(q, p) == (acc, iou)


def test_threshold_prediction_examples():
    cov = np.ones((2, 3), dtype=int)
    cov[1, 2] = 0
    pmap = PredictionMap(4, np.array([[0.2, 0.7, 0.9], [0.0, 0.5, 0.8]]), cov, 12, 8)
    assert threshold_prediction(pmap, 0.0).data.sum() == 5 * 16
    assert threshold_prediction(pmap, np.nextafter(0.9, 1)).data.sum() == 0
    m = threshold_prediction(pmap, 0.5).data
    assert m.shape == (8, 12)
    assert m[::4, ::4].tolist() == [[0, 1, 1], [0, 1, 0]]
    const = PredictionMap(5, np.full((2, 2), 0.7), np.ones((2, 2), int), 10, 10)
    assert threshold_prediction(const, 0.5).data.all()
    assert not threshold_prediction(const, 0.8).data.any()
    with pytest.raises(ValueError):
        threshold_prediction(const, 1.5)


def test_threshold_prediction_margin_is_zero():
    pmap = PredictionMap(10, np.ones((2, 2)), np.ones((2, 2), int), 25, 23)
    m = threshold_prediction(pmap, 0.5).data
    assert m.shape == (23, 25)
    assert m[:20, :20].all() and not m[20:, :].any() and not m[:, 20:].any()


def test_roc_svg_is_well_formed():
    svg = roc_svg(roc_auc([0.9, 0.5, 0.3, 0.1], [1, 0, 1, 0]))
    root = ElementTree.fromstring(svg)
    assert root.tag.endswith("svg")
