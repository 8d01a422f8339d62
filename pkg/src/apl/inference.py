"""Sliding-window dense prediction with overlap averaging."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import PatchTooLargeError, WindowStepError
from .features import DenseHog, HogParams, compute_descriptors
from .gbdt import TreeEnsemble
from .raster import RasterImage, to_grayscale


@dataclass(frozen=True, eq=False)
class PredictionMap:
    """Per-cell mean window score; ``coverage`` counts contributing windows."""

    cell_size: int
    scores: np.ndarray  # (grid_h, grid_w) in [0, 1]
    coverage: np.ndarray  # (grid_h, grid_w) ints
    image_width: int = 0
    image_height: int = 0

    @property
    def grid_width(self) -> int:
        return self.scores.shape[1]

    @property
    def grid_height(self) -> int:
        return self.scores.shape[0]

    @property
    def covered(self) -> np.ndarray:
        return self.coverage > 0

    def __eq__(self, other):
        return (
            isinstance(other, PredictionMap)
            and self.cell_size == other.cell_size
            and np.array_equal(self.scores, other.scores)
            and np.array_equal(self.coverage, other.coverage)
        )

    def save(self, path) -> None:
        """16-bit PNG of ``round(score * 65535)`` plus a ``.json`` sidecar."""
        path = Path(path)
        q = np.floor(self.scores * 65535.0 + 0.5).astype(np.uint16)
        Image.fromarray(q).save(path, format="PNG")
        margin_x = self.image_width - self.grid_width * self.cell_size
        margin_y = self.image_height - self.grid_height * self.cell_size
        meta = {
            "cell_size": self.cell_size,
            "width": self.grid_width,
            "height": self.grid_height,
            "image_width": self.image_width,
            "image_height": self.image_height,
            "uncovered_margin": [int(margin_x), int(margin_y)],
            "coverage": self.coverage.tolist(),
        }
        path.with_suffix(".json").write_text(json.dumps(meta) + "\n")

    @classmethod
    def load(cls, path) -> PredictionMap:
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        with Image.open(path) as im:
            q = np.asarray(im).astype(np.float64)
        scores = q / 65535.0
        coverage = np.asarray(meta.get("coverage", np.ones_like(q)), dtype=np.int64)
        return cls(int(meta["cell_size"]), scores, coverage,
                   int(meta.get("image_width", 0)), int(meta.get("image_height", 0)))


def window_origins(width: int, height: int, window: int, step: int) -> np.ndarray:
    nx = (width - window) // step + 1
    ny = (height - window) // step + 1
    xs, ys = np.meshgrid(np.arange(nx) * step, np.arange(ny) * step)
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def average_overlaps(window_scores: np.ndarray, ratio: int, grid_w: int, grid_h: int):
    """Mean of window scores per cell.

    ``window_scores[j, i]`` is the window with origin cell ``(i, j)``; each
    window spans ``ratio`` x ``ratio`` cells.  Sums use ``math.fsum`` so the
    result does not depend on evaluation order.
    """
    ny, nx = window_scores.shape
    scores = np.zeros((grid_h, grid_w))
    coverage = np.zeros((grid_h, grid_w), dtype=np.int64)
    for cj in range(grid_h):
        j0, j1 = max(0, cj - ratio + 1), min(ny - 1, cj)
        if j0 > j1:
            continue
        for ci in range(grid_w):
            i0, i1 = max(0, ci - ratio + 1), min(nx - 1, ci)
            if i0 > i1:
                continue
            block = window_scores[j0:j1 + 1, i0:i1 + 1]
            coverage[cj, ci] = block.size
            scores[cj, ci] = math.fsum(block.ravel().tolist()) / block.size
    return scores, coverage


def score_windows(
    img: RasterImage,
    model: TreeEnsemble,
    origins: np.ndarray,
    window: int,
    descriptor: str = "hog",
    hog: HogParams = HogParams(),
    color_bins: int = 8,
    batch: int = 1024,
) -> np.ndarray:
    dense = DenseHog(to_grayscale(img), hog) if "hog" in descriptor else None
    out = np.empty(len(origins))
    for i in range(0, len(origins), batch):
        feats = compute_descriptors(img, origins[i:i + batch], window, descriptor, hog, color_bins, dense)
        out[i:i + batch] = model.predict_proba(feats)
    return out


def sliding_window_predict(
    img: RasterImage,
    model: TreeEnsemble,
    window: int = 100,
    step: int = 10,
    descriptor: str = "hog",
    hog: HogParams = HogParams(),
    color_bins: int = 8,
    batch: int = 1024,
) -> PredictionMap:
    if window > img.width or window > img.height:
        raise PatchTooLargeError(f"window {window} exceeds image {img.width}x{img.height}")
    if step < 1 or window % step:
        raise WindowStepError(f"window {window} is not a multiple of step {step}")
    origins = window_origins(img.width, img.height, window, step)
    nx = (img.width - window) // step + 1
    ny = (img.height - window) // step + 1
    flat = score_windows(img, model, origins, window, descriptor, hog, color_bins, batch)
    scores, coverage = average_overlaps(
        flat.reshape(ny, nx), window // step, img.width // step, img.height // step
    )
    return PredictionMap(step, scores, coverage, img.width, img.height)
