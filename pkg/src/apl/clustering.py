"""k-means with k-means++ seeding, used to form unlabeled patch prototypes."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, InsufficientDataError
from .features import FeatureMatrix

KM_MAGIC = b"APLKM v1\n"
# rows whose two best squared distances are closer than this (relative) are re-checked exactly
_TIE_RTOL = 1e-9


@dataclass(frozen=True, eq=False)
class ClusterModel:
    centroids: np.ndarray
    inertia: float = 0.0
    iterations: int = 0
    inertia_history: tuple[float, ...] = field(default=(), repr=False)
    # (mean, scale) applied before distances when standardisation was requested
    scaling: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError("centroids must be a non-empty (k, dim) array")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def transform(self, X: np.ndarray) -> np.ndarray:
        if self.scaling is None:
            return X
        mean, scale = self.scaling
        return (X - mean) / scale


def _rows(features) -> np.ndarray:
    X = features.rows if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatchError("features must be 2-D")
    return X


def sq_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, shape (n, k)."""
    d = (X ** 2).sum(1)[:, None] - 2.0 * X @ C.T + (C ** 2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _nearest(X: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per row with ties going to the lowest index.

    The expanded form is fast but rounds; near-ties are recomputed from
    explicit differences so the tie-break is exact.
    """
    d = sq_distances(X, C)
    labels = np.argmin(d, axis=1)
    if C.shape[0] > 1:
        part = np.partition(d, 1, axis=1)
        scale = np.maximum(part[:, 1], 1e-300)
        close = np.nonzero((part[:, 1] - part[:, 0]) <= _TIE_RTOL * scale + 1e-12)[0]
        for i in close:
            exact = ((C - X[i]) ** 2).sum(1)
            labels[i] = int(np.argmin(exact))
            d[i] = exact
    best = d[np.arange(len(X)), labels]
    return labels, best


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    closest = ((X - X[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        chosen.append(idx)
        closest = np.minimum(closest, ((X - X[idx]) ** 2).sum(1))
    return X[chosen].copy()


def kmeans_fit(
    features,
    k: int = 20,
    seed: int = 0,
    max_iter: int = 300,
    rel_tol: float = 1e-6,
    standardize: bool = False,
) -> tuple[ClusterModel, np.ndarray]:
    """Lloyd iterations from a k-means++ start.

    Returns the fitted model and the final assignment (one label per row).
    Stops when the relative inertia improvement drops below ``rel_tol``, when
    the assignment stops changing, or after ``max_iter`` iterations.
    """
    X = _rows(features)
    if k < 1:
        raise ValueError("k must be >= 1")
    if X.shape[0] < k:
        raise InsufficientDataError(f"{X.shape[0]} rows cannot form {k} clusters")
    scaling = None
    if standardize:
        mean = X.mean(0)
        scale = X.std(0)
        scale[scale == 0] = 1.0
        scaling = (mean, scale)
        X = (X - mean) / scale

    rng = np.random.default_rng(seed)
    C = kmeans_plusplus(X, k, rng)
    labels, best = _nearest(X, C)
    inertia = float(best.sum())
    history = [inertia]
    it = 0
    while it < max_iter:
        it += 1
        counts = np.bincount(labels, minlength=k)
        newC = C.copy()
        filled = counts > 0
        for c in np.nonzero(filled)[0]:
            newC[c] = X[labels == c].mean(0)
        empty = np.nonzero(~filled)[0]
        if len(empty):
            # reseed each emptied centroid at the point farthest from its own centroid
            taken = set()
            order = np.argsort(-best, kind="stable")
            for c in empty:
                for i in order:
                    if int(i) not in taken:
                        taken.add(int(i))
                        newC[c] = X[i]
                        break
        C = newC
        prev_labels = labels
        labels, best = _nearest(X, C)
        new_inertia = float(best.sum())
        history.append(new_inertia)
        prev, inertia = inertia, new_inertia
        if prev <= 0 or (prev - new_inertia) / prev < rel_tol or np.array_equal(labels, prev_labels):
            break

    model = ClusterModel(C, inertia, it, tuple(history), scaling)
    return model, labels


def kmeans_assign(model: ClusterModel, features) -> np.ndarray:
    X = _rows(features)
    if X.shape[1] != model.dim:
        raise DimensionMismatchError(f"features have dim {X.shape[1]}, model expects {model.dim}")
    labels, _ = _nearest(model.transform(X), model.centroids)
    return labels


def save_model(model: ClusterModel, path) -> None:
    """``APLKM v1``: magic line, uint32 k and dim, then float32 centroids (little-endian).

    Standardisation parameters, if any, follow in a trailing ``SCALE`` section.
    """
    with open(Path(path), "wb") as fh:
        fh.write(KM_MAGIC)
        fh.write(struct.pack("<II", model.k, model.dim))
        fh.write(model.centroids.astype("<f4").tobytes())
        if model.scaling is not None:
            fh.write(b"SCALE")
            for v in model.scaling:
                fh.write(np.asarray(v).astype("<f4").tobytes())


def load_model(path) -> ClusterModel:
    with open(Path(path), "rb") as fh:
        if fh.read(len(KM_MAGIC)) != KM_MAGIC:
            raise ValueError(f"{path}: not an APLKM v1 file")
        k, dim = struct.unpack("<II", fh.read(8))
        C = np.frombuffer(fh.read(4 * k * dim), dtype="<f4").astype(np.float64).reshape(k, dim)
        scaling = None
        if fh.read(5) == b"SCALE":
            mean = np.frombuffer(fh.read(4 * dim), dtype="<f4").astype(np.float64)
            scale = np.frombuffer(fh.read(4 * dim), dtype="<f4").astype(np.float64)
            scaling = (mean, scale)
    return ClusterModel(C, scaling=scaling)
