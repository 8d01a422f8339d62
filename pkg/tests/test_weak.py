from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from apl.errors import EmptyPositiveSetError, LabelingRuleError, OutOfExtentError
from apl.features import extract_patches
from apl.raster import Extent
from apl.weak import (
    ClusterLabeling,
    LabeledPatchSet,
    LabelingRule,
    PointLabel,
    build_training_set,
    cluster_relevance,
    label_clusters,
    map_points_to_patches,
    phase_relevance,
    read_points_csv,
    write_points_csv,
)


def grid(w=1000, h=1000, size=100, iid="img"):
    return extract_patches(Extent(0, 0, w, h), size, size, iid)


def test_point_mapping_examples():
    g = grid()
    got = map_points_to_patches([PointLabel("img", 250, 10, "palm"), PointLabel("img", 100, 0, "palm")], g)
    assert got == {("img", 200, 0): Counter(palm=1), ("img", 100, 0): Counter(palm=1)}
    with pytest.raises(OutOfExtentError):
        map_points_to_patches([PointLabel("img", -5, 10, "palm")], g)
    with pytest.raises(OutOfExtentError):
        map_points_to_patches([PointLabel("img", 5, 1000.5, "palm")], g)


def test_edge_points_go_to_last_patch():
    got = map_points_to_patches([PointLabel("img", 1000, 1000, "palm"), PointLabel("img", 1000, 0, "x")], grid())
    assert got == {("img", 900, 900): Counter(palm=1), ("img", 900, 0): Counter(x=1)}


def test_points_of_other_images_ignored():
    assert map_points_to_patches([PointLabel("other", 5, 5, "palm")], grid()) == {}


def test_relevance_example():
    g = grid(w=2000, h=1500)  # 300 patches
    keys = g.keys()
    labels = np.zeros(len(keys), dtype=int)
    labels[-1] = 1
    counts = {keys[i]: Counter(palm=1) for i in range(30)}
    counts[keys[-1]] = Counter(grass=4)
    rel = cluster_relevance(keys, labels, counts, "palm", 3)
    assert rel[0] == pytest.approx(30 / 299)
    assert rel[1] == 0 and rel[2] == 0


def test_relevance_single_cluster():
    g = grid(w=3000, h=1000)
    keys = g.keys()
    counts = {keys[i]: Counter(palm=1) for i in range(30)}
    assert cluster_relevance(keys, np.zeros(300, int), counts, "palm", 1)[0] == pytest.approx(0.1)


@given(st.integers(0, 2**31 - 1), st.booleans())
def test_relevance_conserves_mass(seed, presence):
    r = np.random.default_rng(seed)
    keys = grid(600, 600).keys()
    k = int(r.integers(1, 8))
    labels = r.integers(0, k, size=len(keys))
    counts = {key: Counter(palm=int(r.integers(0, 4))) for key in keys if r.random() < 0.5}
    rel = cluster_relevance(keys, labels, counts, "palm", k, presence)
    sizes = np.bincount(labels, minlength=k)
    per = [min(c["palm"], 1) if presence else c["palm"] for c in counts.values()]
    assert (rel * sizes).sum() == pytest.approx(sum(per))


def test_gap_rule_examples():
    rel = [0.0, 0.9, 0.1, 0.05, 0.1, 0.0, 0.02, 0.0, 0.8, 0.1]
    assert label_clusters(rel, "gap").positive == (1, 8)
    assert label_clusters(rel, "top:2").positive == (1, 8)
    assert label_clusters([0.3, 0.3, 0.1], "top:1").positive == (0,)
    assert label_clusters([0.5, 0.1, 0.2], "thresh:0.2").positive == (0, 2)
    assert label_clusters([0.0, 0.4], "ids:0").positive == (0,)


def test_empty_positive_sets():
    with pytest.raises(EmptyPositiveSetError):
        label_clusters([0.0] * 5, "thresh:0.1")
    with pytest.raises(EmptyPositiveSetError):
        label_clusters([0.2] * 4, "gap")


def test_top_k_all():
    assert label_clusters([0.1, 0.0, 0.3], "top:3").positive == (0, 1, 2)


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=25), st.integers(0, 2**31 - 1))
def test_gap_rule_permutation_equivariant(rel, seed):
    rel = np.array(rel)
    try:
        base = label_clusters(rel, "gap")
    except EmptyPositiveSetError:
        return
    # with distinct values, relabelling clusters relabels the positive set
    if len(set(rel.tolist())) != len(rel):
        return
    perm = np.random.default_rng(seed).permutation(len(rel))
    moved = label_clusters(rel[perm], "gap")
    assert sorted(perm[list(moved.positive)].tolist()) == list(base.positive)


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=25))
def test_gap_rule_splits_at_largest_gap(rel):
    try:
        lab = label_clusters(rel, "gap")
    except EmptyPositiveSetError:
        return
    pos = [rel[i] for i in lab.positive]
    neg = [rel[i] for i in range(len(rel)) if i not in lab.positive]
    assert min(pos) > max(neg)
    gap = min(pos) - max(neg)
    s = sorted(rel, reverse=True)
    assert gap == pytest.approx(max(a - b for a, b in zip(s, s[1:])))


@pytest.mark.parametrize("text", ["", "top", "top:x", "ids:1,b", "thresh:", "best:3", "gap:1"])
def test_bad_rules(text):
    with pytest.raises(LabelingRuleError):
        LabelingRule.parse(text)


def test_rule_range_checks():
    with pytest.raises(LabelingRuleError):
        label_clusters([0.1, 0.2], "top:3")
    with pytest.raises(LabelingRuleError):
        label_clusters([0.1, 0.2], "ids:2")


@pytest.mark.parametrize("text", ["gap", "top:4", "ids:1,3", "thresh:0.25"])
def test_rule_str_round_trip(text):
    assert str(LabelingRule.parse(text)) == text


def test_training_set_subsampling():
    keys = [("img", i, 0) for i in range(10_100)]
    labels = np.ones(10_100, dtype=int)
    labels[:100] = 0  # cluster 0 is positive
    lab = ClusterLabeling((0.5, 0.0), (0,), "gap")
    ts = build_training_set(keys, labels, lab, neg_ratio=3.0, seed=9)
    assert ts.n_positive == 100 and len(ts.keys) == 400
    # oracle: the same seeded draw over negative indices
    chosen = np.random.default_rng(9).choice(np.arange(100, 10_100), size=300, replace=False)
    expected = sorted(list(range(100)) + chosen.tolist())
    assert [k[1] for k in ts.keys] == expected
    again = build_training_set(keys, labels, lab, neg_ratio=3.0, seed=9)
    assert again.keys == ts.keys


def test_training_set_without_subsampling():
    lab = ClusterLabeling((0.5, 0.0), (0,), "gap")
    ts = build_training_set([("a", 0, 0), ("a", 1, 0), ("a", 2, 0)], np.array([1, 0, 1]), lab, neg_ratio=None)
    assert ts.labels.tolist() == [0, 1, 0]


def test_phase_relevance_reduces_to_cluster_relevance(rng):
    g = grid(500, 400)
    keys = g.keys()
    labels = rng.integers(0, 4, size=len(keys))
    pts = [PointLabel("img", float(rng.uniform(0, 499)), float(rng.uniform(0, 399)),
                      "palm" if rng.random() < 0.6 else "soil") for _ in range(80)]
    expected = cluster_relevance(keys, labels, map_points_to_patches(pts, g), "palm", 4)
    assert np.allclose(phase_relevance(keys, labels, pts, "palm", 4, 100), expected, atol=1e-12)


def _brute_relevance(keys, labels, pts, target, k, size, presence):
    hits = np.zeros(k)
    for (iid, x, y), c in zip(keys, labels):
        n = sum(1 for p in pts if p.image_id == iid and p.class_id == target
                and x <= p.x < x + size and y <= p.y < y + size)
        hits[c] += min(n, 1) if presence else n
    sizes = np.bincount(labels, minlength=k)
    return np.divide(hits, sizes, out=np.zeros(k), where=sizes > 0)


@given(st.integers(0, 2**31 - 1), st.booleans())
def test_phase_relevance_matches_brute_force(seed, presence):
    r = np.random.default_rng(seed)
    size = 10
    keys = []
    for iid in ("a", "b"):
        # a dense grid with holes, like a grid restricted to some subareas
        keys += [(iid, x, y) for y in range(0, 41, 5) for x in range(0, 51, 5) if r.random() < 0.7]
    k = 3
    labels = r.integers(0, k, size=len(keys))
    pts = [PointLabel(str(r.choice(["a", "b"])), float(r.uniform(0, 60)), float(r.uniform(0, 50)),
                      str(r.choice(["palm", "soil"]))) for _ in range(40)]
    got = phase_relevance(keys, labels, pts, "palm", k, size, presence)
    assert np.allclose(got, _brute_relevance(keys, labels, pts, "palm", k, size, presence), atol=1e-12)


def test_file_round_trips(tmp_path):
    pts = [PointLabel("a", 1.0, 2.5, "palm"), PointLabel("b", 3.0, 4.0, "soil")]
    write_points_csv(pts, tmp_path / "p.csv")
    assert read_points_csv(tmp_path / "p.csv") == pts
    lab = ClusterLabeling((0.1, 0.7, 0.0), (1,), "gap")
    lab.save(tmp_path / "l.json")
    assert ClusterLabeling.load(tmp_path / "l.json") == lab
    ts = LabeledPatchSet((("a", 0, 100), ("b", 200, 0)), np.array([1, 0]))
    ts.write_csv(tmp_path / "t.csv")
    back = LabeledPatchSet.read_csv(tmp_path / "t.csv")
    assert back.keys == ts.keys and back.labels.tolist() == [1, 0]


def test_points_csv_missing_column(tmp_path):
    (tmp_path / "p.csv").write_text("image_id,x,y\na,1,2\n")
    with pytest.raises(ValueError, match="class"):
        read_points_csv(tmp_path / "p.csv")
