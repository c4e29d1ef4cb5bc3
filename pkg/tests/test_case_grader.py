import time
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sijgrade.augment import AugmentParams
from sijgrade.case_grader import (CaseForestRecipe, CaseGrade, EmbeddingMatrix, JointCase,
                                  alternate_train, build_case_training_set, case_features,
                                  embedding_matrix, ensemble_predict, features_csv,
                                  one_hot_binarize, rule_case_grade, runlength_features,
                                  threshold_three_class, threshold_two_class, to_two_class,
                                  train_case_rf, two_step_predict)
from sijgrade.forest import Forest, ForestParams, Tree
from sijgrade.slice_grader import CnnConfig, build_slice_cnn


# --- independent oracles ------------------------------------------------------

def rule_oracle(v):
    """Literal slice-to-case rule with integer arithmetic and explicit loops."""
    k = len(v)
    fours = 0
    for g in v:
        if g == 4:
            fours += 1
    longest, cur = 0, 0
    for g in v:
        cur = cur + 1 if g == 3 else 0
        longest = max(longest, cur)
    if fours > 1 or longest >= 3:
        return 2
    twos = sum(1 for g in v if g == 2)
    if 10 * twos >= 3 * k:
        return 1
    return 0


def run_oracle(v, n_classes):
    """Enumerate every maximal run by brute force, then sort lengths per class."""
    lengths = {c: [] for c in range(n_classes)}
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[j + 1] == v[i]:
            j += 1
        if (i == 0 or v[i - 1] != v[i]) and (j == len(v) - 1 or v[j + 1] != v[j]):
            lengths[v[i]].append(j - i + 1)
        i = j + 1
    out = []
    for c in range(n_classes):
        s = sorted(lengths[c], reverse=True) + [0, 0]
        out += s[:2]
    return tuple(out), lengths


def _random_sgv(rng, k=None):
    k = int(rng.integers(5, 41)) if k is None else k
    p = rng.dirichlet(np.full(5, 0.6))
    return rng.choice(5, size=k, p=p)


# --- runlength features -------------------------------------------------------

def test_worked_example():
    t = time.perf_counter()
    f = runlength_features("01123333322310", 5)
    assert (time.perf_counter() - t) < 1e-3
    assert tuple(f) == (1, 1, 2, 1, 2, 1, 5, 1, 0, 0)


def test_single_run():
    assert tuple(runlength_features("000", 5)) == (3, 0, 0, 0, 0, 0, 0, 0, 0, 0)


def test_runlength_vs_enumeration_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        v = _random_sgv(rng)
        assert tuple(runlength_features(v, 5)) == run_oracle(list(v), 5)[0]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=1, max_size=40))
def test_runlength_properties(v):
    f = runlength_features(v, 3).reshape(3, 2)
    _, lengths = run_oracle(v, 3)
    assert sum(sum(ls) for ls in lengths.values()) == len(v)
    for c in range(3):
        rest = sorted(lengths[c], reverse=True)[2:]
        assert f[c, 0] >= f[c, 1] and all(f[c, 1] >= r for r in rest)


@pytest.mark.parametrize("bad, n", [([], 5), ("015", 5), ([0, 3], 3)])
def test_runlength_errors(bad, n):
    with pytest.raises(ValueError):
        runlength_features(bad, n)


# --- rule criterion -----------------------------------------------------------

def test_rule_examples():
    assert rule_case_grade([0] * 12) == CaseGrade.HEALTHY
    assert rule_case_grade("01123333322310") == CaseGrade.SICK
    assert rule_case_grade([2, 2, 2, 0, 0, 0, 0, 1, 1, 0]) == CaseGrade.SUSPICIOUS


def test_rule_directed_edges():
    assert rule_case_grade([0, 0, 4, 0, 0, 0]) == CaseGrade.HEALTHY
    assert rule_case_grade([0, 4, 0, 0, 4, 0]) == CaseGrade.SICK
    assert rule_case_grade([0, 3, 3, 3, 0, 0]) == CaseGrade.SICK
    assert rule_case_grade([0, 3, 3, 0, 3, 0]) == CaseGrade.HEALTHY
    # grade-2 count exactly at 0.30 k for every k that makes 0.30 k an integer
    for k in (10, 20, 30, 40):
        n2 = 3 * k // 10
        assert rule_case_grade([2] * n2 + [0] * (k - n2)) == CaseGrade.SUSPICIOUS
        assert rule_case_grade([2] * (n2 - 1) + [0] * (k - n2 + 1)) == CaseGrade.HEALTHY


def test_inserting_healthy_slice_breaks_run():
    assert rule_case_grade([0, 3, 3, 3, 0]) == CaseGrade.SICK
    assert rule_case_grade([0, 3, 3, 0, 3, 0]) == CaseGrade.HEALTHY


def test_rule_oracle_suite_10000():
    rng = np.random.default_rng(2024)
    seen = set()
    for _ in range(10_000):
        v = _random_sgv(rng)
        expected = rule_oracle(list(v))
        assert int(rule_case_grade(v)) == expected, v
        seen.add(expected)
    assert seen == {0, 1, 2}


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([0, 1, 2, 4]), min_size=1, max_size=40), st.randoms())
def test_count_rules_permutation_invariant(v, r):
    w = list(v)
    r.shuffle(w)
    assert rule_case_grade(v) == rule_case_grade(w)


def test_rule_errors():
    with pytest.raises(ValueError):
        rule_case_grade([])
    with pytest.raises(ValueError):
        rule_case_grade([0, 5])


def test_case_grade_views():
    assert [g.two_class for g in CaseGrade] == [0, 1, 1]
    assert [g.label for g in CaseGrade] == ["healthy", "suspicious", "sick"]
    assert to_two_class([0, 1, 2, 0]).tolist() == [0, 1, 1, 0]


# --- thresholds -----------------------------------------------------------------

def test_two_class_examples():
    assert threshold_two_class([0.5, 0.5], 0.42) == 1
    rng = np.random.default_rng(0)
    p = rng.dirichlet([1, 1], size=500)
    assert np.all(threshold_two_class(p, 1.0) == 0)
    assert threshold_two_class([0.0, 1.0], 1.0) == 0


def test_two_class_sweep_monotone():
    p = np.random.default_rng(1).dirichlet([1, 1], size=300)
    counts = [int(threshold_two_class(p, t).sum()) for t in np.linspace(0, 1, 101)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_two_class_half_equals_argmax():
    p = np.random.default_rng(2).dirichlet([1, 1], size=300)
    p = p[p[:, 0] != p[:, 1]]
    assert np.array_equal(threshold_two_class(p, 0.5), np.argmax(p, axis=1))


@pytest.mark.parametrize("tau", [-0.01, 1.01])
def test_two_class_tau_range(tau):
    with pytest.raises(ValueError):
        threshold_two_class([0.5, 0.5], tau)


def test_three_class_examples():
    assert threshold_three_class([0.2, 0.5, 0.3], 0.14, 0.0) == CaseGrade.SUSPICIOUS
    p = np.random.default_rng(3).dirichlet([1, 1, 1], size=1000)
    assert np.all(threshold_three_class(p, 1.0, 1.0) == 0)
    # alpha = 1, beta = -1: sick exactly when Pr(sick) > Pr(healthy) - 1, which fails only
    # at Pr(healthy) = 1 with the strict comparison
    out = threshold_three_class(p, 1.0, -1.0)
    assert np.all(out == 2)
    assert threshold_three_class([1.0, 0.0, 0.0], 1.0, -1.0) == CaseGrade.HEALTHY


def test_three_class_order_of_tests():
    # suspicious wins over sick whenever its probability exceeds alpha
    assert threshold_three_class([0.0, 0.2, 0.8], 0.1, 0.0) == 1
    assert threshold_three_class([0.1, 0.05, 0.85], 0.1, 0.0) == 2
    assert threshold_three_class([0.5, 0.05, 0.45], 0.1, 0.0) == 0


@pytest.mark.parametrize("a, b", [(-0.1, 0), (1.1, 0), (0.5, -1.5), (0.5, 1.5)])
def test_three_class_ranges(a, b):
    with pytest.raises(ValueError):
        threshold_three_class([0.3, 0.3, 0.4], a, b)


# --- forests on case features ---------------------------------------------------

def _leaf_forest(p, n_features=10):
    counts = (np.asarray(p) * 1000).astype(np.int64)[None]
    t = Tree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), counts)
    return Forest([t], len(p), n_features, ForestParams(n_trees=1))


def test_rule_consistent_sgvs_learnable():
    rng = np.random.default_rng(5)
    sgvs = [_random_sgv(rng) for _ in range(2000)]
    X = np.array([runlength_features(v, 5) for v in sgvs], float)
    y = np.array([rule_oracle(list(v)) for v in sgvs])
    f = train_case_rf(X[:1000], y[:1000], seed=0)
    assert f.params.n_trees == 500 and f.params.max_depth == 4
    assert np.mean(f.predict(X[1000:]) == y[1000:]) >= 0.95


def test_case_rf_deterministic_and_constant_for_single_label():
    X = np.random.default_rng(0).integers(0, 9, (40, 10)).astype(float)
    a = train_case_rf(X, np.ones(40, int), seed=3, n_trees=20)
    b = train_case_rf(X, np.ones(40, int), seed=3, n_trees=20)
    assert a.to_json() == b.to_json()
    assert np.all(a.predict(X) == 1)


def test_ensemble_examples():
    votes = [_leaf_forest([1, 0, 0])] * 5 + [_leaf_forest([0, 1, 0])]
    grade, total = ensemble_predict(votes, np.zeros(10))
    assert grade == 0 and np.allclose(total, [5, 1, 0])
    with pytest.raises(ValueError):
        ensemble_predict(votes[:5], np.zeros(10))
    with pytest.raises(ValueError):
        ensemble_predict(votes[:5] + [_leaf_forest([0.5, 0.5])], np.zeros(10))


def test_ensemble_ties_go_to_healthier_class():
    votes = [_leaf_forest([0.5, 0, 0.5])] * 6
    assert ensemble_predict(votes, np.zeros(10))[0] == 0


def test_ensemble_matches_recomputed_sum():
    rng = np.random.default_rng(6)
    X = rng.integers(0, 10, (300, 10)).astype(float)
    y = rng.integers(0, 3, 300)
    forests = [train_case_rf(X, y, seed=s, n_trees=15) for s in range(6)]
    same = [forests[0]] * 6
    Xq = rng.integers(0, 10, (100, 10)).astype(float)
    grade, total = ensemble_predict(forests, Xq)
    recomputed = np.zeros((100, 3))
    for f in forests:
        recomputed += f.predict_proba(Xq)
    assert np.array_equal(grade, np.argmax(recomputed, axis=1))
    assert np.allclose(total, recomputed, atol=1e-12)
    assert np.array_equal(ensemble_predict(same, Xq)[0], forests[0].predict(Xq))
    # positive rescaling of every member's vector leaves the argmax unchanged
    assert np.array_equal(np.argmax(3.7 * total, axis=1), grade)


def test_two_step_examples():
    healthy, unhealthy = _leaf_forest([1, 0]), _leaf_forest([0, 1])
    sick2, susp2 = _leaf_forest([0, 1]), _leaf_forest([1, 0])
    x = np.zeros(10)
    assert two_step_predict(healthy, sick2, x) == CaseGrade.HEALTHY
    assert two_step_predict(unhealthy, sick2, x) == CaseGrade.SICK
    assert two_step_predict(unhealthy, susp2, x) == CaseGrade.SUSPICIOUS
    assert two_step_predict(unhealthy, _leaf_forest([0.9, 0.02, 0.08]), x) == CaseGrade.SICK
    with pytest.raises(ValueError):
        two_step_predict(_leaf_forest([0.2, 0.3, 0.5]), sick2, x)


def test_two_step_consistency_200():
    rng = np.random.default_rng(7)
    sgvs = [_random_sgv(rng) for _ in range(600)]
    X = np.array([runlength_features(v, 5) for v in sgvs], float)
    y = np.array([rule_oracle(list(v)) for v in sgvs])
    binary = train_case_rf(X[:400], to_two_class(y[:400]), seed=1, n_classes=2, n_trees=50)
    keep = y[:400] > 0
    second = train_case_rf(X[:400][keep], y[:400][keep] - 1, seed=2, n_classes=2, n_trees=50)
    out = two_step_predict(binary, second, X[400:])
    b = binary.predict(X[400:])
    assert np.all(b[out > 0] == 1) and np.all(out[b == 0] == 0)


# --- embedding matrices -----------------------------------------------------------

def test_one_hot_examples_and_idempotence():
    M = EmbeddingMatrix(np.array([[0.2, 0.9, 0.1], [0, 0, 0], [0, 0, 0]]), 1)
    H = one_hot_binarize(M)
    assert H.values.tolist() == [[0, 1, 0], [0, 0, 0], [0, 0, 0]]
    assert np.array_equal(one_hot_binarize(H).values, H.values)


def test_one_hot_rows_sum_to_one():
    rng = np.random.default_rng(8)
    for _ in range(50):
        k = int(rng.integers(1, 40))
        vals = np.zeros((40, 5))
        vals[:k] = rng.normal(size=(k, 5))
        H = one_hot_binarize(EmbeddingMatrix(vals, k))
        assert np.all(H.values[:k].sum(axis=1) == 1) and np.all(H.values[k:] == 0)


def test_one_hot_ties_to_lowest_index():
    H = one_hot_binarize(EmbeddingMatrix(np.array([[0.5, 0.5, 0.1]]), 1))
    assert H.values.tolist() == [[1, 0, 0]]


# --- training-set construction with a small grader -----------------------------------

SMALL = dict(channels=(2, 2, 2), hidden=8, input_shape=(20, 40), batch_size=8)


def _rect(rng, grade):
    img = rng.normal(scale=0.1, size=(20, 40)).astype(np.float32)
    img[5:15, 10:30] += grade / 4
    return SimpleNamespace(pixels=img, grade=grade)


def _cases(n, seed, prefix="c"):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = i % 3
        grades = {0: [0, 1, 0, 0, 1, 0], 1: [2, 2, 0, 2, 1, 0], 2: [3, 3, 3, 4, 4, 2]}[label]
        out.append(JointCase(f"{prefix}{i}", "right", [_rect(rng, g) for g in grades], label))
    return out


@pytest.fixture(scope="module")
def grader():
    g = build_slice_cnn(CnnConfig(num_classes=5, **SMALL))
    cases = _cases(6, 0)
    imgs = np.concatenate([c.images for c in cases])
    g.train_epoch(imgs, [r.grade for c in cases for r in c.rects])
    return g


def test_untrained_grader_rejected():
    with pytest.raises(ValueError):
        build_case_training_set(_cases(2, 0), build_slice_cnn(CnnConfig(num_classes=5, **SMALL)))


def test_training_set_shapes_and_determinism(grader):
    cases = _cases(4, 1)
    X0, y0 = build_case_training_set(cases, grader, n_aug=0)
    assert X0.shape == (4, 10) and y0.tolist() == [0, 1, 2, 0]
    X, y, meta = build_case_training_set(cases, grader, n_aug=3, seed=9, return_meta=True)
    assert X.shape == (16, 10) and [m[2] for m in meta[:4]] == [0, 1, 2, 3]
    X2, _ = build_case_training_set(cases, grader, n_aug=3, seed=9)
    assert np.array_equal(X, X2)
    assert np.array_equal(X[::4], X0)
    assert np.all(X.reshape(4, 4, 5, 2)[..., 0].sum(axis=-1) <= 6)
    csv_text = features_csv(X, y, meta)
    assert csv_text.count("\n") == 17 and csv_text.startswith("case,side,round,k,f0")


def test_identity_augmentation_rows_identical(grader):
    cases = _cases(2, 2)
    X, _ = build_case_training_set(cases, grader, n_aug=20, aug=AugmentParams.identity())
    assert X.shape == (42, 10)
    for c in range(2):
        assert np.all(X[c * 21:(c + 1) * 21] == X[c * 21])


def test_embedding_matrix(grader):
    rects = _cases(1, 3)[0].rects
    M = embedding_matrix(grader, rects, K=10)
    assert M.values.shape == (10, 5) and M.k == 6
    assert np.allclose(M.values[:6], grader.embed(rects)) and np.all(M.values[6:] == 0)
    with pytest.raises(ValueError):
        embedding_matrix(grader, rects, K=5)


def test_alternate_train_selection():
    g = build_slice_cnn(CnnConfig(num_classes=5, **SMALL))
    recipe = CaseForestRecipe(n_trees=10, n_aug=1)
    res = alternate_train(g, recipe, _cases(6, 4, "t"), _cases(3, 5, "v"), max_epochs=3)
    assert len(res.val_accuracy) == 3 and len(res.losses) == 3
    assert res.val_accuracy[res.best_epoch] == max(res.val_accuracy)
    assert res.best_epoch == res.val_accuracy.index(max(res.val_accuracy))
    assert res.val_accuracy[res.best_epoch] >= res.val_accuracy[0]
    one = alternate_train(build_slice_cnn(CnnConfig(num_classes=5, **SMALL)), recipe,
                          _cases(6, 4, "t"), _cases(3, 5, "v"), max_epochs=1)
    assert one.best_epoch == 0 and len(one.val_accuracy) == 1


def test_alternate_train_errors():
    g = build_slice_cnn(CnnConfig(num_classes=5, **SMALL))
    recipe = CaseForestRecipe(n_trees=5, n_aug=0)
    with pytest.raises(ValueError):
        alternate_train(g, recipe, _cases(3, 0), _cases(3, 0), 1)
    with pytest.raises(ValueError):
        alternate_train(g, recipe, [], _cases(3, 0, "v"), 1)
