"""Random-forest classifier written from scratch (bootstrap + Gini splits).

Trees are stored as flat arrays so prediction over millions of voxels stays
vectorized. Each tree draws from its own generator seeded by
``(seed, tree_index)``, so building trees in any order gives the same forest.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int = 8
    features_per_split: Union[int, str] = "sqrt"
    min_samples_leaf: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValueError(f"forest parameters must be positive: {self}")
        if isinstance(self.features_per_split, str):
            if self.features_per_split not in ("sqrt", "all"):
                raise ValueError(f"unknown features_per_split {self.features_per_split!r}")
        elif self.features_per_split < 1:
            raise ValueError("features_per_split must be positive")

    def mtry(self, n_features: int) -> int:
        f = self.features_per_split
        if f == "sqrt":
            return max(1, int(math.sqrt(n_features)))
        if f == "all":
            return n_features
        if f > n_features:
            raise ValueError(f"features_per_split={f} exceeds feature dimension {n_features}")
        return int(f)


@dataclass
class Tree:
    feature: np.ndarray    # int, -1 at leaves
    threshold: np.ndarray  # float
    left: np.ndarray       # child index, -1 at leaves
    right: np.ndarray
    counts: np.ndarray     # (n_nodes, n_classes) class histogram at every node

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while len(active):
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return node

    def leaf_proba(self) -> np.ndarray:
        c = self.counts.astype(float)
        return c / c.sum(axis=1, keepdims=True)


@dataclass
class Forest:
    trees: List[Tree]
    n_classes: int
    n_features: int
    params: ForestParams

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        out = np.zeros((len(X), self.n_classes))
        for t in self.trees:
            out += t.leaf_proba()[t.apply(X)]
        out /= len(self.trees)
        return out[0] if single else out

    def predict(self, X) -> np.ndarray:
        # argmax keeps the first maximum, i.e. ties go to the lower class index
        return np.argmax(self.predict_proba(X), axis=-1)

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": "sijgrade-forest",
            "version": FORMAT_VERSION,
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "params": asdict(self.params),
            "trees": [
                {
                    "feature": t.feature.tolist(),
                    "threshold": [float(v) for v in t.threshold],
                    "left": t.left.tolist(),
                    "right": t.right.tolist(),
                    "counts": t.counts.tolist(),
                }
                for t in self.trees
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "Forest":
        if d.get("format") != "sijgrade-forest" or d.get("version") != FORMAT_VERSION:
            raise ValueError("not a sijgrade forest of a supported version")
        trees = [
            Tree(
                np.asarray(t["feature"], dtype=np.int64),
                np.asarray(t["threshold"], dtype=float),
                np.asarray(t["left"], dtype=np.int64),
                np.asarray(t["right"], dtype=np.int64),
                np.asarray(t["counts"], dtype=np.int64).reshape(len(t["feature"]), d["n_classes"]),
            )
            for t in d["trees"]
        ]
        return cls(trees, int(d["n_classes"]), int(d["n_features"]), ForestParams(**d["params"]))

    @classmethod
    def from_json(cls, text: str) -> "Forest":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Forest":
        return cls.from_json(Path(path).read_text())


def _best_split(x: np.ndarray, y: np.ndarray, n_classes: int, min_leaf: int):
    """Lowest weighted-Gini threshold on one feature, or None.

    Works on integer class counts; the score minimized is
    ``n_l - sum(c_l^2)/n_l + n_r - sum(c_r^2)/n_r`` (n times weighted Gini).
    """
    n = len(x)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    onehot = np.zeros((n, n_classes), dtype=np.int64)
    onehot[np.arange(n), y[order]] = 1
    left = np.cumsum(onehot, axis=0)[:-1]
    total = left[-1] + onehot[-1] if n > 1 else onehot[0]
    n_left = np.arange(1, n)
    valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
    if not valid.any():
        return None
    idx = np.flatnonzero(valid)
    cl = left[idx]
    cr = total[None, :] - cl
    nl = n_left[idx].astype(float)
    nr = n - nl
    score = nl - (cl * cl).sum(axis=1) / nl + nr - (cr * cr).sum(axis=1) / nr
    best = int(np.argmin(score))  # first minimum is the lowest threshold
    j = idx[best]
    thr = 0.5 * (xs[j] + xs[j + 1])
    if not thr < xs[j + 1]:
        # midpoint rounded onto the upper value; fall back to the lower one
        thr = xs[j]
    return float(score[best]), float(thr)


def _grow_tree(X, y, n_classes, params: ForestParams, rng: np.random.Generator,
               bootstrap: bool) -> Tree:
    n, d = X.shape
    mtry = params.mtry(d)
    sample = rng.integers(0, n, n) if bootstrap else np.arange(n)
    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y[idx], minlength=n_classes))
        return len(feature) - 1

    root = new_node(sample)
    stack = [(root, sample, 0)]
    while stack:
        node, idx, depth = stack.pop()
        c = counts[node]
        if depth >= params.max_depth or np.count_nonzero(c) <= 1 or len(idx) < 2 * params.min_samples_leaf:
            continue
        # examine mtry features; keep drawing if none of them can split
        perm = rng.permutation(d)
        best = None
        examined = 0
        for f in perm:
            if examined >= mtry and best is not None:
                break
            examined += 1
            res = _best_split(X[idx, f], y[idx], n_classes, params.min_samples_leaf)
            if res is None:
                continue
            score, thr = res
            cand = (score, int(f), thr)
            if best is None or cand[0] < best[0] - 1e-12 * max(1.0, abs(best[0])) or (
                abs(cand[0] - best[0]) <= 1e-12 * max(1.0, abs(best[0]))
                and (cand[1], cand[2]) < (best[1], best[2])
            ):
                best = cand
        if best is None:
            continue
        _, f, thr = best
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        ln, rn = new_node(li), new_node(ri)
        feature[node], threshold[node], left[node], right[node] = f, thr, ln, rn
        stack.append((rn, ri, depth + 1))
        stack.append((ln, li, depth + 1))

    return Tree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=float),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(counts, dtype=np.int64),
    )


def train_forest(X, y, params: ForestParams = ForestParams(), n_classes: Optional[int] = None,
                 bootstrap: bool = True, workers: int = 1) -> Forest:
    """Fit a Breiman-style forest. Deterministic for a fixed ``params.seed``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if X.ndim != 2:
        raise ValueError("ragged or non-2D feature matrix")
    if len(X) != len(y):
        raise ValueError(f"{len(X)} samples but {len(y)} labels")
    if len(X) < 2:
        raise ValueError("need at least two samples")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite feature values")
    y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError("labels must be non-negative")
    k = int(y.max()) + 1
    if n_classes is None:
        n_classes = k
    elif k > n_classes:
        raise ValueError(f"label {k - 1} outside {n_classes} classes")
    params.mtry(X.shape[1])

    def build(t):
        rng = np.random.default_rng([params.seed & 0xFFFFFFFFFFFFFFFF, t])
        return _grow_tree(X, y, n_classes, params, rng, bootstrap)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            trees = list(pool.map(build, range(params.n_trees)))
    else:
        trees = [build(t) for t in range(params.n_trees)]
    return Forest(trees, n_classes, X.shape[1], params)


def forest_predict_proba(f: Forest, x) -> np.ndarray:
    return f.predict_proba(x)
