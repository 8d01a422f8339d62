"""Turning misaligned point labels into cluster-level (bag) labels.

Point labels are mapped to the disjoint patch that contains them, counted per
cluster and divided by cluster size to give a relevance score.  A labeling rule
then picks the positive clusters, and every member patch inherits its cluster's
label.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyPositiveSetError, LabelingRuleError, OutOfExtentError
from .features import PatchGrid


@dataclass(frozen=True)
class PointLabel:
    image_id: str
    x: float
    y: float
    class_id: str


PointLabelSet = list  # list[PointLabel]


def read_points_csv(path) -> list[PointLabel]:
    """Read ``image_id,x,y,class`` rows."""
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"image_id", "x", "y", "class"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [
            PointLabel(r["image_id"], float(r["x"]), float(r["y"]), r["class"]) for r in reader
        ]


def write_points_csv(points: Iterable[PointLabel], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "x", "y", "class"])
        for p in points:
            w.writerow([p.image_id, _num(p.x), _num(p.y), p.class_id])


def _num(v: float):
    return int(v) if float(v).is_integer() else v


def map_points_to_patches(points: Iterable[PointLabel], grid: PatchGrid) -> dict[tuple, Counter]:
    """Per-patch class counts for points falling on ``grid``'s image.

    Patches are half-open squares; a point on the right or bottom image edge
    goes to the last patch of that row/column.  Points whose patch is not in
    ``grid`` (e.g. a grid restricted to some subareas) are skipped.
    """
    if grid.stride != grid.patch_size:
        raise ValueError("point mapping needs a disjoint grid (stride == patch size)")
    size = grid.patch_size
    w, h = grid.image_width, grid.image_height
    present = set(grid.origins)
    last_x = max((x for x, _ in grid.origins), default=0)
    last_y = max((y for _, y in grid.origins), default=0)
    counts: dict[tuple, Counter] = {}
    for p in points:
        if p.image_id != grid.image_id:
            continue
        if not (0 <= p.x <= w and 0 <= p.y <= h) or math.isnan(p.x) or math.isnan(p.y):
            raise OutOfExtentError(f"point {p} lies outside image {grid.image_id!r} ({w}x{h})")
        ox = min(int(p.x // size) * size, last_x)
        oy = min(int(p.y // size) * size, last_y)
        if (ox, oy) not in present:
            continue
        counts.setdefault((grid.image_id, ox, oy), Counter())[p.class_id] += 1
    return counts


def cluster_relevance(
    keys: Sequence[tuple],
    labels: np.ndarray,
    patch_counts: dict[tuple, Counter],
    target: str,
    k: int,
    presence: bool = False,
) -> np.ndarray:
    """Target observations per cluster divided by cluster size (0 for empty clusters).

    With ``presence=True`` a patch contributes at most one observation.
    """
    labels = np.asarray(labels, dtype=np.int64)
    sizes = np.bincount(labels, minlength=k)
    hits = np.zeros(k, dtype=np.int64)
    for key, c in zip(keys, labels):
        n = patch_counts.get(tuple(key), Counter()).get(target, 0)
        hits[c] += min(n, 1) if presence else n
    members = {tuple(k) for k in keys}
    expected = sum(
        (min(cnt.get(target, 0), 1) if presence else cnt.get(target, 0))
        for key, cnt in patch_counts.items() if key in members
    )
    # mass conservation, checked in integers before dividing
    assert int(hits.sum()) == expected, "relevance lost observations"
    rel = np.zeros(k)
    nz = sizes > 0
    rel[nz] = hits[nz] / sizes[nz]
    return rel


@dataclass(frozen=True)
class LabelingRule:
    """One of ``gap``, ``top:M``, ``ids:I,J,...`` or ``thresh:T``."""

    kind: str
    value: object = None

    @classmethod
    def parse(cls, text: str) -> LabelingRule:
        text = text.strip()
        name, _, arg = text.partition(":")
        try:
            if name == "gap" and not arg:
                return cls("gap")
            if name == "top":
                return cls("top", int(arg))
            if name == "ids":
                return cls("ids", tuple(int(v) for v in arg.split(",") if v.strip()))
            if name == "thresh":
                return cls("thresh", float(arg))
        except ValueError as exc:
            raise LabelingRuleError(f"bad labeling rule {text!r}: {exc}") from None
        raise LabelingRuleError(f"unknown labeling rule {text!r}")

    def __str__(self):
        if self.kind == "gap":
            return "gap"
        if self.kind == "ids":
            return "ids:" + ",".join(str(i) for i in self.value)
        return f"{self.kind}:{self.value}"


@dataclass(frozen=True)
class ClusterLabeling:
    relevance: tuple[float, ...]
    positive: tuple[int, ...]
    rule: str

    def to_json(self) -> dict:
        return {"relevance": list(self.relevance), "positive": list(self.positive), "rule": self.rule}

    @classmethod
    def from_json(cls, obj: dict) -> ClusterLabeling:
        return cls(tuple(float(v) for v in obj["relevance"]),
                   tuple(int(v) for v in obj["positive"]), str(obj["rule"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> ClusterLabeling:
        return cls.from_json(json.loads(Path(path).read_text()))


def _ranked(relevance: np.ndarray) -> np.ndarray:
    # descending relevance, ties to the lower cluster index
    return np.lexsort((np.arange(len(relevance)), -relevance))


def label_clusters(relevance, rule: LabelingRule | str = "gap") -> ClusterLabeling:
    if isinstance(rule, str):
        rule = LabelingRule.parse(rule)
    rel = np.asarray(relevance, dtype=np.float64)
    k = len(rel)
    if rule.kind == "ids":
        bad = [i for i in rule.value if not 0 <= i < k]
        if bad:
            raise LabelingRuleError(f"cluster ids {bad} out of range for k={k}")
        positive = set(rule.value)
    elif rule.kind == "top":
        m = rule.value
        if not 1 <= m <= k:
            raise LabelingRuleError(f"top-{m} is impossible with k={k}")
        positive = set(_ranked(rel)[:m].tolist())
    elif rule.kind == "thresh":
        positive = set(np.nonzero(rel >= rule.value)[0].tolist())
    elif rule.kind == "gap":
        order = _ranked(rel)
        if k == 1:
            positive = {0} if rel[0] > 0 else set()
        else:
            gaps = rel[order[:-1]] - rel[order[1:]]
            cut = int(np.argmax(gaps))
            positive = set(order[:cut + 1].tolist()) if gaps[cut] > 0 else set()
    else:
        raise LabelingRuleError(f"unknown rule kind {rule.kind!r}")
    if not positive:
        raise EmptyPositiveSetError(f"rule {rule} selects no positive cluster")
    return ClusterLabeling(tuple(float(v) for v in rel), tuple(sorted(int(i) for i in positive)), str(rule))


@dataclass(frozen=True)
class LabeledPatchSet:
    keys: tuple[tuple, ...]
    labels: np.ndarray  # 1 = positive, 0 = negative

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    def write_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "x", "y", "label"])
            for key, y in zip(self.keys, self.labels):
                w.writerow([key[0], key[1], key[2], int(y)])

    @classmethod
    def read_csv(cls, path) -> LabeledPatchSet:
        keys, labels = [], []
        with open(Path(path), newline="") as fh:
            for r in csv.DictReader(fh):
                keys.append((r["image_id"], int(r["x"]), int(r["y"])))
                labels.append(int(r["label"]))
        return cls(tuple(keys), np.asarray(labels, dtype=np.int64))


def build_training_set(
    keys: Sequence[tuple],
    labels: np.ndarray,
    labeling: ClusterLabeling,
    neg_ratio: float | None = 3.0,
    seed: int = 0,
) -> LabeledPatchSet:
    """Broadcast cluster labels to member patches.

    With ``neg_ratio`` set, negatives are subsampled (seeded, without
    replacement) to at most ``neg_ratio`` per positive; kept rows stay in
    input order.
    """
    labels = np.asarray(labels, dtype=np.int64)
    y = np.isin(labels, labeling.positive).astype(np.int64)
    keep = np.arange(len(y))
    if neg_ratio is not None:
        pos = np.nonzero(y == 1)[0]
        neg = np.nonzero(y == 0)[0]
        n_neg = min(len(neg), int(round(neg_ratio * len(pos))))
        rng = np.random.default_rng(seed)
        chosen = rng.choice(neg, size=n_neg, replace=False) if n_neg < len(neg) else neg
        keep = np.sort(np.concatenate([pos, chosen]))
    return LabeledPatchSet(tuple(tuple(keys[i]) for i in keep), y[keep])


def phase_relevance(
    keys: Sequence[tuple],
    labels: np.ndarray,
    points: Sequence[PointLabel],
    target: str,
    k: int,
    patch_size: int,
    presence: bool = False,
) -> np.ndarray:
    """Relevance over an overlapping patch set, one disjoint tessellation at a time.

    Patches sharing an image and the same origin phase ``(x % size, y % size)``
    form a disjoint grid, so every point maps to at most one of them.  Target
    observations and cluster sizes are summed over all such grids.  With a
    disjoint input this reduces to ``cluster_relevance``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    groups: dict[tuple, list[int]] = {}
    for i, key in enumerate(keys):
        groups.setdefault((key[0], key[1] % patch_size, key[2] % patch_size), []).append(i)
    by_image: dict[str, list[PointLabel]] = {}
    for p in points:
        by_image.setdefault(p.image_id, []).append(p)
    hits = np.zeros(k)
    sizes = np.zeros(k, dtype=np.int64)
    for (iid, dx, dy), idx in sorted(groups.items()):
        xs = [keys[i][1] for i in idx]
        ys = [keys[i][2] for i in idx]
        x0, y0 = min(xs), min(ys)
        x1, y1 = max(xs) + patch_size, max(ys) + patch_size
        grid = PatchGrid(iid, patch_size, patch_size,
                         tuple((x - x0, y - y0) for x, y in zip(xs, ys)), x1 - x0, y1 - y0)
        # shift into grid coordinates; points off this tessellation are dropped
        local = [
            PointLabel(iid, p.x - x0, p.y - y0, p.class_id)
            for p in by_image.get(iid, ()) if x0 <= p.x < x1 and y0 <= p.y < y1
        ]
        counts = map_points_to_patches(local, grid)
        sub = labels[idx]
        size = np.bincount(sub, minlength=k)
        hits += cluster_relevance(grid.keys(), sub, counts, target, k, presence) * size
        sizes += size
    rel = np.zeros(k)
    nz = sizes > 0
    rel[nz] = hits[nz] / sizes[nz]
    return rel
