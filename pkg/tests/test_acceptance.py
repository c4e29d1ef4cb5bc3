"""Acceptance suite: ten criteria, each reported as one PASS/FAIL line in the terminal summary.

Criteria 1-6 are oracle suites that run in seconds.  Criteria 7-10 share one
desk-scale training run on a 60-phantom cohort (roughly a quarter of an hour on
one core), so the module fixture trains once and the later tests reuse it.
"""
import itertools
import json
import os
import subprocess
import sys
import time
from collections import deque

import numpy as np
import pytest
from scipy import ndimage

from sijgrade import case_grader as cg
from sijgrade.case_grader import rule_case_grade, runlength_features
from sijgrade.config import Config
from sijgrade.forest import ForestParams, train_forest
from sijgrade.metrics import Rect, rect_overlap, roc_auc
from sijgrade.morphology import adaptive_skeleton_segment, candidate_thresholds, close_bits, connected_components
from sijgrade.phantom import cohort_specs, generate_cohort, generate_phantom, large_phantom_spec
from sijgrade.pipeline import CaseData, evaluate, locate_joints, split_indices, strip_timings, train_pipeline
from sijgrade.roi import rects_by_side
from sijgrade.slice_grader import CnnConfig, gradient_check
from sijgrade.volume import BinaryMask, save_volume

TRAIN_BUDGET_S = 30 * 60
GRADE_BUDGET_S = 60.0


# --- independent oracles ------------------------------------------------------------

def literal_rule(v):
    """Case grade from the three criteria, written as plain loops."""
    k = len(v)
    fours = 0
    for g in v:
        if g == 4:
            fours += 1
    longest3 = run = 0
    for g in v:
        run = run + 1 if g == 3 else 0
        longest3 = max(longest3, run)
    if fours >= 2 or longest3 >= 3:
        return 2
    twos = sum(1 for g in v if g == 2)
    if 10 * twos >= 3 * k:  # 0.30 * k without floating point
        return 1
    return 0


def flood_fill_count(bits):
    seen = np.zeros(bits.shape, bool)
    offsets = [d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]
    labels = np.zeros(bits.shape, np.int64)
    n = 0
    for start in zip(*np.nonzero(bits)):
        if seen[start]:
            continue
        n += 1
        seen[start] = True
        labels[start] = n
        q = deque([start])
        while q:
            z, y, x = q.popleft()
            for dz, dy, dx in offsets:
                p = (z + dz, y + dy, x + dx)
                if all(0 <= p[i] < bits.shape[i] for i in range(3)) and bits[p] and not seen[p]:
                    seen[p] = True
                    labels[p] = n
                    q.append(p)
    return labels, n


def mann_whitney(truth, scores):
    pos = [s for t, s in zip(truth, scores) if t]
    neg = [s for t, s in zip(truth, scores) if not t]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


# --- criteria 1-6 --------------------------------------------------------------------

def test_criterion_01_worked_example():
    runlength_features("01123333322310", 5)  # warm-up
    t = time.perf_counter()
    f = runlength_features("01123333322310", 5)
    elapsed = time.perf_counter() - t
    assert tuple(int(v) for v in f) == (1, 1, 2, 1, 2, 1, 5, 1, 0, 0)
    assert elapsed < 1e-3


def test_criterion_02_rule_oracle_suite():
    assert rule_case_grade([4, 0, 0, 0, 0]) == 0
    assert rule_case_grade([0, 3, 3, 3, 0]) == 2
    assert rule_case_grade([2, 2, 2] + [0] * 7) == 1
    assert rule_case_grade([2, 2] + [0] * 8) == 0
    rng = np.random.default_rng(2024)
    for _ in range(10_000):
        k = int(rng.integers(5, 41))
        v = rng.integers(0, 5, k, endpoint=False)
        if rng.random() < 0.5:  # bias towards the low grades so every branch is exercised
            v = rng.choice(5, k, p=[0.45, 0.1, 0.3, 0.1, 0.05])
        assert int(rule_case_grade(v)) == literal_rule(v.tolist())


def test_criterion_03_forest():
    rng = np.random.default_rng(0)
    # oblique separating line with a margin of 0.05 on either side
    X = rng.uniform(-1, 1, (4000, 2))
    m = (X[:, 0] + 0.5 * X[:, 1]) / np.hypot(1.0, 0.5)
    X = X[np.abs(m) > 0.05][:2000]
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(int)
    params = ForestParams(n_trees=50, max_depth=12, seed=7)
    f = train_forest(X[:1000], y[:1000], params, n_classes=2)
    assert np.mean(f.predict(X[1000:]) == y[1000:]) >= 0.99
    again = train_forest(X[:1000], y[:1000], params, n_classes=2)
    assert f.to_json().encode() == again.to_json().encode()
    Q = rng.uniform(-3, 3, (10_000, 2))
    p = f.predict_proba(Q)
    assert np.abs(p.sum(axis=1) - 1.0).max() <= 1e-9


def test_criterion_04_metric_oracles():
    a = Rect((100.0, 100.0), 50.0, 25.0)
    assert rect_overlap(a, a) == (1.0, 0.0)
    d, dist = rect_overlap(a, Rect((125.0, 100.0), 50.0, 25.0))
    assert abs(d - 0.5) < 1e-12 and abs(dist - 25.0) < 1e-12
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(4, 60))
        t = rng.integers(0, 2, n)
        t[:2] = (0, 1)
        s = rng.integers(0, 12, n) / 11.0  # coarse grid forces ties
        auc = roc_auc(t, s).auc
        assert abs(auc - mann_whitney(t, s)) <= 1e-9
        assert abs(auc + roc_auc(1 - t, s).auc - 1.0) <= 1e-9
    assert roc_auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]).auc == 1.0


def test_criterion_05_gradient_check():
    t = time.perf_counter()
    err = gradient_check(CnnConfig(num_classes=5, channels=(2, 2, 2), input_shape=(20, 40)), batch=4)
    assert err < 1e-3
    assert time.perf_counter() - t < 60


def test_criterion_06_morphology_oracles():
    rng = np.random.default_rng(6)
    for _ in range(50):
        bits = rng.random((32, 32, 32)) < rng.uniform(0.05, 0.35)
        grid = connected_components(BinaryMask((32, 32, 32), (1.0, 1.0, 1.0), bits))
        ref, n = flood_fill_count(bits)
        assert grid.count == n
        # same partition: a bijection between label sets
        pairs = set(zip(grid.labels[bits].tolist(), ref[bits].tolist()))
        assert len(pairs) == n
        for d in (3, 5, 7):
            assert (close_bits(bits, d) | ~bits).all()
    cands = candidate_thresholds()
    assert len(cands) == 22
    for spec in cohort_specs(10, seed=66):
        vol = generate_phantom(spec).volume
        counts = [ndimage.label((vol.voxels >= c) & (vol.voxels <= 1300), np.ones((3, 3, 3)))[1]
                  for c in cands]
        lower, mask = adaptive_skeleton_segment(vol)
        assert lower == float(cands[int(np.argmin(counts))])
        assert (mask.bits | ~((vol.voxels >= lower) & (vol.voxels <= 1300))).all()


# --- shared cohort run for criteria 7-10 ---------------------------------------------

@pytest.fixture(scope="module")
def cohort_run(tmp_path_factory):
    cfg = Config()
    cases = [CaseData.from_phantom(p) for p in generate_cohort(60, seed=0)]
    tr, va, te = split_indices(len(cases), cfg)
    t = time.perf_counter()
    models, _ = train_pipeline(cases, cfg, tr, va)
    train_s = time.perf_counter() - t
    test_cases = [cases[i] for i in te]
    report = evaluate(models, test_cases, cfg)
    mdir = tmp_path_factory.mktemp("models")
    models.save(mdir)
    return {"cfg": cfg, "models": models, "models_dir": mdir, "test": test_cases,
            "split": (tr, va, te), "report": report, "train_s": train_s}


def test_criterion_07_end_to_end(cohort_run):
    rep = cohort_run["report"]
    tr, va, te = cohort_run["split"]
    assert (len(tr), len(va), len(te)) == (45, 7, 8)
    assert cohort_run["train_s"] <= TRAIN_BUDGET_S
    assert rep["two_class"]["accuracy"] >= 0.90
    assert rep["three_class"]["accuracy"] >= 0.75
    assert rep["roi"]["mean_dice"] >= 0.70
    assert rep["roi"]["mean_center_distance_mm"] <= 6.0


def test_criterion_08_ensemble(cohort_run):
    models = cohort_run["models"]
    assert len(models.ensemble) == 6
    truth, ens, singles = [], [], []
    for c in cohort_run["test"]:
        sides = rects_by_side(locate_joints(c.volume, models, cohort_run["cfg"], None, c.case_id).rects)
        for side in ("right", "left"):
            f = runlength_features(models.grader.predict(sides[side]), models.grader.num_classes)
            g, _ = cg.ensemble_predict(models.ensemble, f)
            total = np.zeros(3)
            for m in models.ensemble:
                total = total + m.predict_proba(f)
            assert int(g) == int(np.argmax(total))
            truth.append(int(c.case_grades[side]))
            ens.append(int(g))
            singles.append([int(m.predict(f)) for m in models.ensemble])
    truth, ens, singles = np.array(truth), np.array(ens), np.array(singles)
    best = max(np.mean(singles[:, i] == truth) for i in range(singles.shape[1]))
    assert np.mean(ens == truth) >= best - 0.02


def test_criterion_09_threshold_sweep(cohort_run, tmp_path):
    rep = cohort_run["report"]
    roc = rep["roc"]
    fpr, tpr = np.array(roc["fpr"]), np.array(roc["tpr"])
    assert (fpr[0], tpr[0]) == (0.0, 0.0) and (fpr[-1], tpr[-1]) == (1.0, 1.0)
    assert (np.diff(fpr) >= 0).all() and (np.diff(tpr) >= 0).all()
    assert roc["auc"] >= 0.9
    sweep = sorted(rep["tau_sweep"], key=lambda r: -r["tau"])
    assert all(a["fpr"] <= b["fpr"] and a["tpr"] <= b["tpr"] for a, b in zip(sweep, sweep[1:]))
    a, b = rep["table13"]["a"], rep["table13"]["b"]
    assert a["tau"] == 0.42 and (b["alpha"], b["beta"]) == (0.14, 0.0)
    assert np.array(a["confusion"]["counts"]).shape == (2, 2)
    assert np.array(b["confusion"]["counts"]).shape == (3, 3)
    assert {"accuracy", "sensitivity", "specificity"} <= set(a)
    # the same thresholds through the command line
    c = cohort_run["test"][0]
    save_volume(c.volume, tmp_path / "v.json")
    out = tmp_path / "r.json"
    cmd = [sys.executable, "-m", "sijgrade.cli", "grade", "--volume", str(tmp_path / "v.json"),
           "--models", str(cohort_run["models_dir"]), "--tau", "0.42", "--alpha", "0.14",
           "--beta", "0", "--out", str(out)]
    assert subprocess.run(cmd, capture_output=True).returncode == 0
    joints = json.loads(out.read_text())["joints"]
    assert set(joints) == {"right", "left"}


def test_criterion_10_performance(cohort_run, tmp_path):
    save_volume(generate_phantom(large_phantom_spec(seed=1), "large").volume, tmp_path / "large.json")
    env = dict(os.environ, SIJGRADE_THREADS="1", OMP_NUM_THREADS="1")

    def cmd(out):
        return [sys.executable, "-m", "sijgrade.cli", "grade", "--volume", str(tmp_path / "large.json"),
                "--models", str(cohort_run["models_dir"]), "--out", str(tmp_path / out)]

    t = time.perf_counter()
    done = subprocess.run(cmd("solo.json"), env=env, capture_output=True, text=True)
    elapsed = time.perf_counter() - t
    assert done.returncode == 0, done.stderr
    assert elapsed <= GRADE_BUDGET_S
    procs = [subprocess.Popen(cmd(f"par{i}.json"), env=env, stdout=subprocess.DEVNULL,
                              stderr=subprocess.PIPE) for i in range(2)]
    assert all(p.wait() == 0 for p in procs)
    reports = [strip_timings(json.loads((tmp_path / n).read_text()))
               for n in ("solo.json", "par0.json", "par1.json")]
    assert reports[0] == reports[1] == reports[2]
