"""Second-order gradient-boosted decision trees for binary classification.

Logistic loss, exact greedy split search, L2-regularised Newton leaf weights.
Thresholds are always an observed training value and samples with
``x <= threshold`` go left, so predictions only depend on the per-feature
order of the data.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy.special import expit

from .errors import DegenerateLabelsError, DimensionMismatchError

_P_LO = np.nextafter(0.0, 1.0)
_P_HI = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class GbdtParams:
    rounds: int = 100
    learning_rate: float = 0.1
    max_depth: int = 4
    min_child_weight: float = 1.0
    l2_lambda: float = 1.0
    base_score: float = 0.5
    subsample: float = 1.0
    colsample: float = 1.0

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if not 0 < self.base_score < 1:
            raise ValueError("base_score must lie in (0, 1)")
        if not (0 < self.subsample <= 1 and 0 < self.colsample <= 1):
            raise ValueError("subsample and colsample must lie in (0, 1]")

    @property
    def base_logit(self) -> float:
        return math.log(self.base_score / (1.0 - self.base_score))


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat binary tree; ``feature[i] == -1`` marks a leaf holding ``value[i]``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self, node: int = 0) -> int:
        if self.feature[node] < 0:
            return 0
        return 1 + max(self.depth(int(self.left[node])), self.depth(int(self.right[node])))

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.nonzero(active)[0]
            n = node[rows]
            go_left = X[rows, self.feature[n]] <= self.threshold[n]
            node[rows] = np.where(go_left, self.left[n], self.right[n])
            active[rows] = self.feature[node[rows]] >= 0
        return self.value[node]

    def to_json(self, node: int = 0) -> dict:
        if self.feature[node] < 0:
            return {"leaf": float(self.value[node])}
        return {
            "feature": int(self.feature[node]),
            "threshold": float(self.threshold[node]),
            "left": self.to_json(int(self.left[node])),
            "right": self.to_json(int(self.right[node])),
        }

    @classmethod
    def from_json(cls, obj: dict) -> Tree:
        b = _TreeBuilder()
        stack = [(obj, b.add())]
        while stack:
            o, i = stack.pop()
            if "leaf" in o:
                b.set_leaf(i, float(o["leaf"]))
            else:
                left, right = b.add(), b.add()
                b.set_split(i, int(o["feature"]), float(o["threshold"]), left, right)
                stack.append((o["right"], right))
                stack.append((o["left"], left))
        return b.build()


class _TreeBuilder:
    def __init__(self):
        self.feature, self.threshold, self.left, self.right, self.value = [], [], [], [], []

    def add(self) -> int:
        for lst, v in ((self.feature, -1), (self.threshold, 0.0), (self.left, -1),
                       (self.right, -1), (self.value, 0.0)):
            lst.append(v)
        return len(self.feature) - 1

    def set_leaf(self, i, w):
        self.value[i] = w

    def set_split(self, i, f, t, left, right):
        self.feature[i], self.threshold[i], self.left[i], self.right[i] = f, t, left, right

    def build(self) -> Tree:
        return Tree(
            np.asarray(self.feature, dtype=np.int64), np.asarray(self.threshold, dtype=np.float64),
            np.asarray(self.left, dtype=np.int64), np.asarray(self.right, dtype=np.int64),
            np.asarray(self.value, dtype=np.float64),
        )


@dataclass(frozen=True, eq=False)
class TreeEnsemble:
    trees: tuple[Tree, ...]
    params: GbdtParams
    dim: int
    loss_history: tuple[float, ...] = field(default=(), repr=False)

    def raw_scores(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.dim:
            raise DimensionMismatchError(f"features have dim {X.shape[1]}, model expects {self.dim}")
        total = np.zeros(X.shape[0])
        for t in self.trees:
            total += t.predict(X)
        return self.params.base_logit + self.params.learning_rate * total

    def predict_proba(self, X) -> np.ndarray:
        return np.clip(expit(self.raw_scores(X)), _P_LO, _P_HI)

    def to_json(self) -> dict:
        return {
            "params": asdict(self.params),
            "dim": self.dim,
            "trees": [t.to_json() for t in self.trees],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def from_json(cls, obj: dict) -> TreeEnsemble:
        params = GbdtParams(**obj["params"])
        return cls(tuple(Tree.from_json(t) for t in obj["trees"]), params, int(obj["dim"]))

    @classmethod
    def load(cls, path) -> TreeEnsemble:
        return cls.from_json(json.loads(Path(path).read_text()))


def predict_score(model: TreeEnsemble, features) -> float:
    """Probability of the positive class for one feature vector."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatchError("predict_score takes a single vector")
    return float(model.predict_proba(x)[0])


def logistic_loss(y: np.ndarray, logits: np.ndarray) -> float:
    """Mean binary cross-entropy evaluated from logits (numerically stable)."""
    return float(np.mean(np.logaddexp(0.0, logits) - y * logits))


@njit(cache=True)
def _scan_node(XT, idx, g, h, G, H, lam, mcw):
    """Exact greedy scan over presorted columns of one node.

    ``idx[f]`` lists the node's rows sorted by feature ``f``.  Only strictly
    larger gains replace the incumbent, so ties resolve to the lowest feature
    and then the lowest threshold.  Returns (gain, feature_row, position).
    """
    d, nn = idx.shape
    best_gain, best_f, best_pos = 0.0, -1, -1
    if H + lam <= 0.0:
        return best_gain, best_f, best_pos
    parent = G * G / (H + lam)
    for f in range(d):
        GL = 0.0
        HL = 0.0
        for j in range(nn - 1):
            r = idx[f, j]
            GL += g[r]
            HL += h[r]
            if XT[f, r] < XT[f, idx[f, j + 1]]:
                HR = H - HL
                # with lam == 0 a saturated child can have zero curvature
                if HL >= mcw and HR >= mcw and HL + lam > 0.0 and HR + lam > 0.0:
                    GR = G - GL
                    gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent)
                    if gain > best_gain:
                        best_gain, best_f, best_pos = gain, f, j
    return best_gain, best_f, best_pos


@njit(cache=True)
def _partition(idx, go_left, nl):
    d, nn = idx.shape
    left = np.empty((d, nl), dtype=idx.dtype)
    right = np.empty((d, nn - nl), dtype=idx.dtype)
    for f in range(d):
        a = 0
        b = 0
        for j in range(nn):
            r = idx[f, j]
            if go_left[r]:
                left[f, a] = r
                a += 1
            else:
                right[f, b] = r
                b += 1
    return left, right


def _grow_tree(XT, sorted_idx, g, h, features, params: GbdtParams) -> Tree:
    """Depth-first growth.

    ``XT`` holds the candidate features as rows, ``sorted_idx`` is the
    matching (n_features, n_rows) array of row indices sorted by value, and
    ``features`` maps a row of ``XT`` back to the original feature index.
    """
    b = _TreeBuilder()
    lam, mcw = params.l2_lambda, params.min_child_weight
    go_left = np.zeros(XT.shape[1], dtype=np.bool_)
    stack = [(b.add(), sorted_idx, 0)]
    while stack:
        node, idx, depth = stack.pop()
        rows = idx[0]
        G, H = float(g[rows].sum()), float(h[rows].sum())
        fr = -1
        if depth < params.max_depth and len(rows) > 1:
            _, fr, pos = _scan_node(XT, idx, g, h, G, H, lam, mcw)
        if fr < 0:
            b.set_leaf(node, -G / (H + lam) + 0.0 if H + lam > 0 else 0.0)
            continue
        go_left[:] = False
        go_left[idx[fr, : pos + 1]] = True
        left_idx, right_idx = _partition(idx, go_left, pos + 1)
        left, right = b.add(), b.add()
        b.set_split(node, int(features[fr]), float(XT[fr, idx[fr, pos]]), left, right)
        stack.append((right, right_idx, depth + 1))
        stack.append((left, left_idx, depth + 1))
    return b.build()


def train_gbdt(X, y, params: GbdtParams = GbdtParams(), seed: int = 0) -> TreeEnsemble:
    """Fit a boosted ensemble on rows ``X`` with binary labels ``y``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DimensionMismatchError(f"X {X.shape} and y {y.shape} do not align")
    if not np.isfinite(X).all():
        raise ValueError("feature rows must be finite")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    if y.min() == y.max():
        raise DegenerateLabelsError("training data needs at least one example of each class")

    n, d = X.shape
    rng = np.random.default_rng(seed)
    XT_all = np.ascontiguousarray(X.T)
    presorted = np.argsort(XT_all, axis=1, kind="stable").astype(np.int32)  # (d, n)
    logits = np.full(n, params.base_logit)
    losses = [logistic_loss(y, logits)]
    trees = []
    for _ in range(params.rounds):
        p = expit(logits)
        g = p - y
        h = p * (1.0 - p)
        features = np.arange(d)
        idx, XT = presorted, XT_all
        if params.colsample < 1.0:
            m = max(1, int(round(params.colsample * d)))
            features = np.sort(rng.choice(d, size=m, replace=False))
            idx, XT = presorted[features], XT_all[features]
        if params.subsample < 1.0:
            m = max(2, int(round(params.subsample * n)))
            keep = np.zeros(n, dtype=bool)
            keep[rng.choice(n, size=m, replace=False)] = True
            idx = idx[keep[idx]].reshape(idx.shape[0], m)
        tree = _grow_tree(XT, idx, g, h, features, params)
        trees.append(tree)
        logits = logits + params.learning_rate * tree.predict(X)
        losses.append(logistic_loss(y, logits))
    return TreeEnsemble(tuple(trees), params, d, tuple(losses))
