"""Slice-to-case aggregation: the rule criterion, run-length features and case forests."""
from __future__ import annotations

import copy
import csv
import enum
import io
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .augment import AugmentParams, apply_affine, draw_affine
from .forest import Forest, ForestParams, train_forest

SUSPICIOUS_RATIO = 0.30
SICK_GRADE4_MIN = 2
SICK_GRADE3_RUN = 3
CASE_TREES = 500
CASE_DEPTH = 4
N_AUG = 20
ENSEMBLE_SIZE = 6
EMBED_ROWS = 40


class CaseGrade(enum.IntEnum):
    HEALTHY = 0
    SUSPICIOUS = 1
    SICK = 2

    @property
    def two_class(self) -> int:
        """0 = healthy, 1 = unhealthy (suspicious or sick)."""
        return 0 if self is CaseGrade.HEALTHY else 1

    @property
    def label(self) -> str:
        return self.name.lower()


TWO_CLASS_NAMES = ("healthy", "unhealthy")


def to_two_class(labels) -> np.ndarray:
    return (np.asarray(labels) > 0).astype(np.int64)


def _check_sgv(sgv) -> np.ndarray:
    if isinstance(sgv, str):
        sgv = [int(c) for c in sgv]
    g = np.asarray(sgv, dtype=np.int64).ravel()
    if g.size == 0:
        raise ValueError("slice-grade vector is empty")
    if g.min() < 0:
        raise ValueError("slice grades must be non-negative")
    return g


def runs(sgv) -> List[Tuple[int, int]]:
    """(value, length) for each maximal run of equal consecutive entries."""
    g = _check_sgv(sgv)
    cut = np.flatnonzero(np.diff(g)) + 1
    starts = np.concatenate([[0], cut])
    ends = np.concatenate([cut, [len(g)]])
    return [(int(g[s]), int(e - s)) for s, e in zip(starts, ends)]


def rule_case_grade(sgv, suspicious_ratio: float = SUSPICIOUS_RATIO,
                    grade4_min: int = SICK_GRADE4_MIN, grade3_run: int = SICK_GRADE3_RUN) -> CaseGrade:
    """Case grade of a five-class slice-grade vector under the slice-to-case rule."""
    g = _check_sgv(sgv)
    if g.max() > 4:
        raise ValueError("rule criterion needs five-class grades in [0, 4]")
    longest3 = max((n for v, n in runs(g) if v == 3), default=0)
    if np.count_nonzero(g == 4) >= grade4_min or longest3 >= grade3_run:
        return CaseGrade.SICK
    if np.count_nonzero(g == 2) >= suspicious_ratio * len(g):
        return CaseGrade.SUSPICIOUS
    return CaseGrade.HEALTHY


def runlength_features(sgv, n_classes: int) -> np.ndarray:
    """Longest and second-longest run length of each class, class by class."""
    g = _check_sgv(sgv)
    if g.max() >= n_classes:
        raise ValueError(f"grade {g.max()} outside {n_classes} classes")
    best = np.zeros((n_classes, 2), dtype=np.int64)
    for v, n in runs(g):
        if n > best[v, 0]:
            best[v] = (n, best[v, 0])
        elif n > best[v, 1]:
            best[v, 1] = n
    return best.ravel()


# --- training-set construction --------------------------------------------

@dataclass
class JointCase:
    """One sacroiliac joint: its ordered ROI rectangles and case label."""

    case_id: str
    side: str
    rects: list
    label: int

    @property
    def images(self) -> np.ndarray:
        return np.stack([r.pixels for r in self.rects]).astype(np.float32)


def grade_vector(grader, images) -> np.ndarray:
    return grader.predict(images)


def build_case_training_set(cases: Sequence[JointCase], grader, n_aug: int = N_AUG,
                            aug: AugmentParams = AugmentParams.slice(), seed: int = 0,
                            return_meta: bool = False):
    """Run-length feature rows for each case: the plain one plus ``n_aug`` augmented rounds.

    Every rectangle of a case shares one affine draw per round. Row order is
    case by case, round 0 (unaugmented) first.
    """
    if not getattr(grader, "trained", False):
        raise ValueError("slice grader is not trained")
    if not cases:
        raise ValueError("no cases")
    m = grader.num_classes
    X, y, meta = [], [], []
    # graded one case at a time so memory stays bounded by a single case's rounds
    for ci, case in enumerate(cases):
        base = case.images
        k = len(base)
        batches = [base]
        for r in range(1, n_aug + 1):
            draw = draw_affine(aug, np.random.default_rng([seed, ci, r]))
            batches.append(apply_affine(base, draw).astype(np.float32))
        pred = grader.predict(np.concatenate(batches))
        for r in range(n_aug + 1):
            X.append(runlength_features(pred[r * k:(r + 1) * k], m))
            y.append(case.label)
            meta.append((case.case_id, case.side, r, k))
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    return (X, y, meta) if return_meta else (X, y)


def case_features(cases: Sequence[JointCase], grader) -> np.ndarray:
    """Unaugmented run-length features, one row per case."""
    return build_case_training_set(cases, grader, n_aug=0)[0]


def features_csv(X, y, meta) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case", "side", "round", "k"] + [f"f{i}" for i in range(X.shape[1])] + ["label"])
    for row, lab, (cid, side, r, k) in zip(X, y, meta):
        w.writerow([cid, side, r, k] + [int(v) for v in row] + [int(lab)])
    return buf.getvalue()


# --- case forests ----------------------------------------------------------

def case_forest_params(seed: int, n_trees: int = CASE_TREES, max_depth: int = CASE_DEPTH) -> ForestParams:
    return ForestParams(n_trees=n_trees, max_depth=max_depth, seed=seed)


def train_case_rf(features, labels, seed: int = 0, n_classes: int = 3,
                  n_trees: int = CASE_TREES, max_depth: int = CASE_DEPTH) -> Forest:
    return train_forest(features, labels, case_forest_params(seed, n_trees, max_depth),
                        n_classes=n_classes)


def ensemble_predict(forests: Sequence[Forest], x) -> Tuple[int, np.ndarray]:
    """Sum the members' probability vectors; the grade is the argmax (ties to the healthier class)."""
    if len(forests) != ENSEMBLE_SIZE:
        raise ValueError(f"ensemble needs exactly {ENSEMBLE_SIZE} forests, got {len(forests)}")
    k = forests[0].n_classes
    if any(f.n_classes != k for f in forests):
        raise ValueError("ensemble members disagree on the number of classes")
    total = sum(f.predict_proba(x) for f in forests)
    return np.argmax(total, axis=-1), total


def threshold_two_class(probs, tau: float) -> int:
    """1 (unhealthy) iff Pr(unhealthy) > tau."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    p = np.asarray(probs, dtype=float)
    if p.shape[-1] != 2:
        raise ValueError("two-class thresholding needs 2-vectors")
    return int(p[..., 1] > tau) if p.ndim == 1 else (p[:, 1] > tau).astype(np.int64)


def threshold_three_class(probs, alpha: float, beta: float):
    """Suspicious iff Pr(suspicious) > alpha; else sick iff Pr(sick) - Pr(healthy) > beta."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if not -1.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [-1, 1], got {beta}")
    p = np.atleast_2d(np.asarray(probs, dtype=float))
    if p.shape[1] != 3:
        raise ValueError("three-class thresholding needs 3-vectors")
    out = np.where(p[:, 1] > alpha, 1, np.where(p[:, 2] - p[:, 0] > beta, 2, 0))
    return int(out[0]) if np.ndim(probs) == 1 else out


def two_step_predict(binary: Forest, second: Forest, x):
    """Healthy cases first; the rest go to a suspicious-vs-sick classifier.

    ``second`` is either 2-class (0 = suspicious, 1 = sick) or 3-class, in
    which case only its suspicious and sick columns are compared.
    """
    if binary.n_classes != 2:
        raise ValueError("first stage must be a two-class forest")
    if second.n_classes not in (2, 3):
        raise ValueError("second stage must have 2 or 3 classes")
    X = np.atleast_2d(np.asarray(x, dtype=float))
    first = binary.predict(X)
    p2 = second.predict_proba(X)
    if second.n_classes == 3:
        p2 = p2[:, 1:]
    stage2 = np.where(p2[:, 1] > p2[:, 0], CaseGrade.SICK, CaseGrade.SUSPICIOUS)
    out = np.where(first == 0, CaseGrade.HEALTHY, stage2).astype(np.int64)
    return int(out[0]) if np.ndim(x) == 1 else out


# --- embedding-matrix alternatives -----------------------------------------

@dataclass
class EmbeddingMatrix:
    values: np.ndarray  # (K, m)
    k: int

    def flat(self) -> np.ndarray:
        return self.values.ravel()


def embedding_matrix(grader, rects, K: int = EMBED_ROWS) -> EmbeddingMatrix:
    k = len(rects)
    if k > K:
        raise ValueError(f"{k} slices exceed the {K}-row budget")
    m = grader.num_classes
    vals = np.zeros((K, m))
    if k:
        vals[:k] = grader.embed(rects)
    return EmbeddingMatrix(vals, k)


def one_hot_binarize(M: EmbeddingMatrix) -> EmbeddingMatrix:
    vals = np.zeros_like(M.values)
    if M.k:
        hot = np.argmax(M.values[:M.k], axis=1)
        vals[np.arange(M.k), hot] = 1.0
    return EmbeddingMatrix(vals, M.k)


# --- alternating grader / case-forest training ----------------------------

@dataclass
class CaseForestRecipe:
    n_classes: int = 3
    n_trees: int = CASE_TREES
    max_depth: int = CASE_DEPTH
    n_aug: int = N_AUG
    seed: int = 0


@dataclass
class AlternateResult:
    grader: object
    forest: Forest
    val_accuracy: List[float]
    losses: List[float]
    best_epoch: int


def _slice_training_data(cases: Sequence[JointCase], scheme):
    from .slice_grader import map_grades

    imgs = np.concatenate([c.images for c in cases])
    grades = np.concatenate([[r.grade for r in c.rects] for c in cases])
    return imgs, map_grades(grades, scheme)


def _case_labels(cases, n_classes):
    y = np.asarray([c.label for c in cases], dtype=np.int64)
    return y if n_classes == 3 else to_two_class(y)


def alternate_train(grader, recipe: CaseForestRecipe, train: Sequence[JointCase],
                    val: Sequence[JointCase], max_epochs: int,
                    slice_aug: AugmentParams = AugmentParams.slice(),
                    log: Optional[Callable[[str], None]] = None,
                    case_train: Optional[Sequence[JointCase]] = None) -> AlternateResult:
    """Alternate one grader epoch with a case-forest fit; keep the best validation epoch.

    ``train`` supplies graded rectangles for the slice grader; the case forest
    is fitted on ``case_train`` (default: ``train``), which may hold the full,
    partly ungraded rectangle sequences the pipeline produced.
    """
    case_train = train if case_train is None else case_train
    if not train or not val or not case_train:
        raise ValueError("training and validation sets must be non-empty")
    ids_t = {(c.case_id, c.side) for c in list(train) + list(case_train)}
    ids_v = {(c.case_id, c.side) for c in val}
    if ids_t & ids_v:
        raise ValueError("training and validation sets overlap")
    if max_epochs < 1:
        raise ValueError("max_epochs must be >= 1")
    imgs, labels = _slice_training_data(train, grader.scheme)
    y_val = _case_labels(val, recipe.n_classes)
    best = None
    trace, losses = [], []
    for epoch in range(max_epochs):
        losses.append(grader.train_epoch(imgs, labels, slice_aug))
        X, y = build_case_training_set(case_train, grader, recipe.n_aug, slice_aug,
                                       seed=recipe.seed + 1000 * epoch)
        if recipe.n_classes == 2:
            y = to_two_class(y)
        forest = train_case_rf(X, y, recipe.seed, recipe.n_classes, recipe.n_trees, recipe.max_depth)
        acc = float(np.mean(forest.predict(case_features(val, grader)) == y_val))
        trace.append(acc)
        if log:
            log(f"epoch {epoch + 1}: loss {losses[-1]:.4f} val case accuracy {acc:.3f}")
        if best is None or acc > best[0]:
            best = (acc, epoch, grader.copy(), forest)
    return AlternateResult(best[2], best[3], trace, losses, best[1])
