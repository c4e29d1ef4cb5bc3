"""Evaluation metrics: confusion matrices, sensitivity/specificity, ROC/AUC, rectangle overlap."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = truth, columns = prediction

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    def normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True).astype(float)
        out = np.zeros(self.counts.shape)
        np.divide(self.counts, rows, out=out, where=rows > 0)
        return out

    def to_dict(self) -> dict:
        return {"counts": self.counts.tolist(),
                "normalized": np.round(self.normalized(), 6).tolist(),
                "accuracy": round(self.accuracy, 6)}


def _labels(a, name) -> np.ndarray:
    a = np.asarray(a).ravel()
    if a.size == 0:
        raise ValueError(f"{name} is empty")
    return a.astype(np.int64)


def confusion_and_accuracy(truth, pred, n: int) -> Tuple[ConfusionMatrix, float]:
    t, p = _labels(truth, "truth"), _labels(pred, "pred")
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.size} vs {p.size}")
    if min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= n:
        raise ValueError(f"labels must lie in [0, {n})")
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    cm = ConfusionMatrix(counts)
    return cm, cm.accuracy


def sensitivity_specificity(cm, positive: int = 1) -> Tuple[float, float]:
    """TP/(TP+FN) and TN/(TN+FP); accepts raw counts or a row-normalized matrix."""
    c = np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm, dtype=float)
    if c.shape != (2, 2):
        raise ValueError("sensitivity/specificity needs a 2x2 matrix")
    if positive not in (0, 1):
        raise ValueError("positive class must be 0 or 1")
    neg = 1 - positive
    pos_total, neg_total = c[positive].sum(), c[neg].sum()
    if pos_total == 0:
        raise ValueError("no positive cases in truth")
    if neg_total == 0:
        raise ValueError("no negative cases in truth")
    return float(c[positive, positive] / pos_total), float(c[neg, neg] / neg_total)


@dataclass
class RocCurve:
    thresholds: List[float]
    fpr: List[float]
    tpr: List[float]
    auc: float

    def to_dict(self) -> dict:
        return {"thresholds": [None if not np.isfinite(t) else round(t, 9) for t in self.thresholds],
                "fpr": [round(v, 9) for v in self.fpr],
                "tpr": [round(v, 9) for v in self.tpr],
                "auc": round(self.auc, 9)}


def _binary_truth(truth) -> np.ndarray:
    t = np.asarray(truth).ravel()
    if not np.isin(t, (0, 1)).all():
        raise ValueError("truth labels must be binary")
    t = t.astype(bool)
    if t.all() or not t.any():
        raise ValueError("ROC needs both classes in truth")
    return t


def roc_auc(truth, scores) -> RocCurve:
    """Sweep every distinct score as a 'score >= threshold' cut; trapezoidal AUC."""
    t = _binary_truth(truth)
    s = np.asarray(scores, dtype=float).ravel()
    if s.shape != t.shape:
        raise ValueError("truth and scores differ in length")
    order = np.argsort(-s, kind="mergesort")
    s, t = s[order], t[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]  # end of each tie block
    tp = np.cumsum(t)[last]
    fp = np.cumsum(~t)[last]
    tpr = np.r_[0.0, tp / t.sum()]
    fpr = np.r_[0.0, fp / (~t).sum()]
    auc = float(_trapezoid(tpr, fpr))
    thr = [float("inf")] + s[last].tolist()
    return RocCurve(thr, fpr.tolist(), tpr.tolist(), auc)


def threshold_sweep(truth, scores, taus: Sequence[float]) -> List[dict]:
    """Counts for the 'score > tau' decision at each tau (positive = 1)."""
    t = np.asarray(truth).astype(bool).ravel()
    s = np.asarray(scores, dtype=float).ravel()
    rows = []
    for tau in taus:
        p = s > tau
        rows.append({"tau": float(tau), "tp": int((p & t).sum()), "fp": int((p & ~t).sum()),
                     "tn": int((~p & ~t).sum()), "fn": int((~p & t).sum()),
                     "tpr": float((p & t).sum() / max(t.sum(), 1)),
                     "fpr": float((p & ~t).sum() / max((~t).sum(), 1))})
    return rows


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle in one slice plane: center (x, y) mm and size (w, h) mm."""

    center: Tuple[float, float]
    width: float
    height: float
    z: int = 0

    @classmethod
    def of(cls, r) -> "Rect":
        if isinstance(r, Rect):
            return r
        g = getattr(r, "geometry", r)
        return cls(tuple(g.center), float(g.width_mm), float(g.height_mm), int(g.z))

    def bounds(self):
        cx, cy = self.center
        return cx - self.width / 2, cx + self.width / 2, cy - self.height / 2, cy + self.height / 2


def rect_overlap(r1, r2) -> Tuple[float, float]:
    """(Dice of the two areas, distance between centers in mm)."""
    a, b = Rect.of(r1), Rect.of(r2)
    if a.z != b.z:
        raise ValueError("rectangles lie in different slices")
    if min(a.width, a.height, b.width, b.height) <= 0:
        raise ValueError("degenerate rectangle")
    ax0, ax1, ay0, ay1 = a.bounds()
    bx0, bx1, by0, by1 = b.bounds()
    inter = max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(0.0, min(ay1, by1) - max(ay0, by0))
    dice = 2 * inter / (a.width * a.height + b.width * b.height)
    dist = float(np.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]))
    return float(dice), dist


def kfold_split(n_cases: int, k: int, seed: int = 0) -> List[np.ndarray]:
    """Shuffle, then deal indices into ``k`` folds whose sizes differ by at most one."""
    if k < 1 or n_cases < 1:
        raise ValueError("n_cases and k must be positive")
    if k > n_cases:
        raise ValueError(f"k={k} exceeds n={n_cases}")
    perm = np.random.default_rng(seed).permutation(n_cases)
    return [np.sort(f) for f in np.array_split(perm, k)]


def percent_agreement(a, b) -> float:
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValueError("length mismatch")
    if a.size == 0:
        raise ValueError("empty label vectors")
    return float(np.mean(a == b))


def classification_report(truth, pred, n: int, positive: int = 1) -> Dict:
    """Confusion matrix, accuracy and (for two classes) sensitivity/specificity."""
    cm, acc = confusion_and_accuracy(truth, pred, n)
    out = {"confusion": cm.to_dict(), "accuracy": round(acc, 6)}
    if n == 2:
        try:
            sens, spec = sensitivity_specificity(cm, positive)
            out.update(sensitivity=round(sens, 6), specificity=round(spec, 6))
        except ValueError as e:
            out["sensitivity_specificity_error"] = str(e)
    return out


def write_json(obj, path) -> None:
    """Write-then-rename so a failure never leaves a partial report."""
    import os
    from pathlib import Path

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
