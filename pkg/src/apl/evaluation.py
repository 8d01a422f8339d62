"""Evaluation against point labels (ROC) and against reference masks (accuracy, IoU)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import (
    DegenerateLabelsError,
    DegeneratePolygonError,
    DimensionMismatchError,
    OutOfExtentError,
)
from .inference import PredictionMap
from .raster import Extent, SegmentationMask
from .weak import PointLabel

POSITIVE, NEGATIVE, UNLABELED = 1, 0, -1


@dataclass(frozen=True, eq=False)
class LabelRaster:
    cell_size: int
    states: np.ndarray  # (grid_h, grid_w) of POSITIVE / NEGATIVE / UNLABELED
    counts: np.ndarray  # points per cell, before voting

    @property
    def labeled(self) -> np.ndarray:
        return self.states != UNLABELED


def rasterize_point_labels(
    points: Iterable[PointLabel],
    cell: int,
    extent: Extent,
    target: str,
    image_id: str | None = None,
    tie_positive: bool = True,
) -> LabelRaster:
    """Majority vote of target vs. non-target points in each cell."""
    if extent.width % cell or extent.height % cell:
        raise DimensionMismatchError(f"cell {cell} does not divide {extent.width}x{extent.height}")
    gw, gh = extent.width // cell, extent.height // cell
    pos = np.zeros((gh, gw), dtype=np.int64)
    neg = np.zeros((gh, gw), dtype=np.int64)
    n = 0
    for p in points:
        if image_id is not None and p.image_id != image_id:
            continue
        if not extent.contains(p.x, p.y):
            raise OutOfExtentError(f"point {p} lies outside {extent}")
        i = min(int((p.x - extent.x) // cell), gw - 1)
        j = min(int((p.y - extent.y) // cell), gh - 1)
        if p.class_id == target:
            pos[j, i] += 1
        else:
            neg[j, i] += 1
        n += 1
    counts = pos + neg
    assert int(counts.sum()) == n, "rasterization lost points"
    states = np.full((gh, gw), UNLABELED, dtype=np.int8)
    has = counts > 0
    win = (pos > neg) | ((pos == neg) & tie_positive)
    states[has & win] = POSITIVE
    states[has & ~win] = NEGATIVE
    return LabelRaster(cell, states, counts)


@dataclass(frozen=True, eq=False)
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_json(self) -> list:
        # the leading (0, 0) point has threshold +inf, written as null
        th = [None if not np.isfinite(t) else float(t) for t in self.thresholds]
        return [{"threshold": t, "fpr": float(f), "tpr": float(p)}
                for t, f, p in zip(th, self.fpr, self.tpr)]


def pairwise_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    ranks = rankdata(s)  # average ranks resolve ties as half-wins
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc(scores, labels, unlabeled=None) -> RocCurve:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    keep = np.ones(s.shape, dtype=bool)
    if unlabeled is not None:
        keep &= ~np.asarray(unlabeled, dtype=bool).ravel()
    s, y = s[keep], y[keep].astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("ROC needs at least one positive and one negative label")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    distinct = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[distinct]
    fp = np.cumsum(~y)[distinct]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[distinct]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    check = pairwise_auc(s, y)
    if abs(auc - check) > 1e-9:
        raise AssertionError(f"trapezoidal AUC {auc} disagrees with pair count {check}")
    return RocCurve(thresholds, fpr, tpr, auc)


@dataclass(frozen=True)
class PolygonAnnotation:
    image_id: str
    polygons: tuple[tuple[tuple[float, float], ...], ...]

    @classmethod
    def load(cls, path) -> PolygonAnnotation:
        obj = json.loads(Path(path).read_text())
        return cls(str(obj.get("image_id", "")),
                   tuple(tuple((float(x), float(y)) for x, y in poly) for poly in obj["polygons"]))


def _inside_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd ray casting; points exactly on an edge count as inside."""
    inside = np.zeros(px.shape, dtype=bool)
    on_edge = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for k in range(n):
        x1, y1 = poly[k]
        x2, y2 = poly[(k + 1) % n]
        cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        within = (
            (np.minimum(x1, x2) <= px) & (px <= np.maximum(x1, x2))
            & (np.minimum(y1, y2) <= py) & (py <= np.maximum(y1, y2))
        )
        on_edge |= (cross == 0) & within
        # half-open in y so a vertex shared by two edges is counted once
        straddles = (y1 > py) != (y2 > py)
        if y1 != y2:
            x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            inside ^= straddles & (px < x_at)
    return inside | on_edge


def polygons_to_mask(ann: PolygonAnnotation | Sequence, extent: Extent) -> SegmentationMask:
    """Pixel is set iff its centre lies inside any polygon (even-odd per polygon)."""
    polys = ann.polygons if isinstance(ann, PolygonAnnotation) else ann
    mask = np.zeros((extent.height, extent.width), dtype=bool)
    for poly in polys:
        if len(poly) < 3:
            raise DegeneratePolygonError(f"polygon with {len(poly)} vertices")
        arr = np.asarray(poly, dtype=np.float64)
        # restrict work to the polygon's bounding box
        x0 = max(int(math.floor(arr[:, 0].min() - extent.x - 0.5)), 0)
        x1 = min(int(math.ceil(arr[:, 0].max() - extent.x - 0.5)) + 1, extent.width)
        y0 = max(int(math.floor(arr[:, 1].min() - extent.y - 0.5)), 0)
        y1 = min(int(math.ceil(arr[:, 1].max() - extent.y - 0.5)) + 1, extent.height)
        if x0 >= x1 or y0 >= y1:
            continue
        py, px = np.mgrid[y0:y1, x0:x1].astype(np.float64)
        px += extent.x + 0.5
        py += extent.y + 0.5
        mask[y0:y1, x0:x1] |= _inside_polygon(px, py, arr)
    return SegmentationMask(mask.astype(np.uint8))


def majority_vote_masks(masks: Sequence[SegmentationMask], tie_value: int = 1) -> SegmentationMask:
    if not masks:
        raise ValueError("majority vote over an empty list of masks")
    shape = masks[0].data.shape
    for m in masks:
        if m.data.shape != shape:
            raise DimensionMismatchError(f"mask shapes differ: {shape} vs {m.data.shape}")
    votes = np.sum([m.data.astype(np.int64) for m in masks], axis=0)
    twice, n = 2 * votes, len(masks)
    out = (twice > n) | ((twice == n) & bool(tie_value))
    return SegmentationMask(out.astype(np.uint8))


def mask_metrics(pred: SegmentationMask, ref: SegmentationMask, region=None) -> tuple[float, float]:
    """(accuracy, IoU); optional boolean ``region`` restricts the pixels compared."""
    if pred.data.shape != ref.data.shape:
        raise DimensionMismatchError(f"mask shapes differ: {pred.data.shape} vs {ref.data.shape}")
    p = pred.data.astype(bool)
    r = ref.data.astype(bool)
    if region is not None:
        region = np.asarray(region, dtype=bool)
        p, r = p[region], r[region]
    total = p.size
    accuracy = float(np.count_nonzero(p == r)) / total if total else 1.0
    union = np.count_nonzero(p | r)
    iou = float(np.count_nonzero(p & r)) / union if union else 1.0
    return accuracy, iou


def threshold_prediction(pmap: PredictionMap, t: float = 0.5, width: int | None = None,
                         height: int | None = None) -> SegmentationMask:
    """Binarise covered cells at ``score >= t`` and upsample to pixels."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    c = pmap.cell_size
    width = width or pmap.image_width or pmap.grid_width * c
    height = height or pmap.image_height or pmap.grid_height * c
    cells = ((pmap.scores >= t) & pmap.covered).astype(np.uint8)
    up = np.kron(cells, np.ones((c, c), dtype=np.uint8))
    out = np.zeros((height, width), dtype=np.uint8)
    h, w = min(height, up.shape[0]), min(width, up.shape[1])
    out[:h, :w] = up[:h, :w]
    return SegmentationMask(out)


def roc_svg(curve: RocCurve, title: str = "ROC", size: int = 320) -> str:
    """Static SVG rendering of a ROC curve."""
    pad = 40
    span = size - 2 * pad

    def pt(f, t):
        return f"{pad + f * span:.2f},{size - pad - t * span:.2f}"

    path = " ".join(pt(f, t) for f, t in zip(curve.fpr, curve.tpr))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">\n'
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="#444"/>\n'
        f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{pad}" '
        f'stroke="#bbb" stroke-dasharray="4 3"/>\n'
        f'<polyline points="{path}" fill="none" stroke="#1f6fb2" stroke-width="2"/>\n'
        f'<text x="{size / 2}" y="{pad - 12}" text-anchor="middle" font-size="13">'
        f"{title} (AUC = {curve.auc:.3f})</text>\n"
        f'<text x="{size / 2}" y="{size - 10}" text-anchor="middle" font-size="11">'
        f"false positive rate</text>\n"
        f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 12 {size / 2})">true positive rate</text>\n'
        "</svg>\n"
    )
