import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mrmil import InputError
from mrmil import metrics as mt


def test_kappa_examples():
    assert mt.kappa(np.diag([3, 4, 5])) == 1.0
    assert mt.kappa(np.diag([3, 4, 5]), "quadratic") == 1.0
    assert mt.kappa(np.array([[25, 25], [25, 25]])) == 0.0
    flags = []
    assert mt.kappa(np.array([[7, 0], [0, 0]]), flags=flags) == 0.0 and flags == ["kappa_degenerate"]
    with pytest.raises(InputError):
        mt.kappa(np.zeros((2, 2)))


def test_kappa_random_3x3_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        O = rng.integers(0, 20, (3, 3))
        O[0, 0] += 1
        for w in ("none", "linear", "quadratic"):
            assert mt.kappa(O, w) == pytest.approx(oracles.brute_kappa(O.tolist(), w), abs=1e-12)


@settings(max_examples=100)
@given(st.integers(2, 5), st.integers(0, 2 ** 31 - 1))
def test_kappa_unweighted_relabel_invariant(n, seed):
    rng = np.random.default_rng(seed)
    O = rng.integers(0, 10, (n, n))
    O[0, 0] += 1
    p = rng.permutation(n)
    assert mt.kappa(O[np.ix_(p, p)]) == pytest.approx(mt.kappa(O), abs=1e-12)
    for w in ("none", "linear", "quadratic"):
        assert -1 - 1e-12 <= mt.kappa(O, w) <= 1 + 1e-12


def test_auroc_examples():
    assert mt.roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert mt.roc_auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(InputError):
        mt.roc_auc([0.1, 0.2], [1, 1])


def test_auroc_pairwise_oracle():
    rng = np.random.default_rng(1)
    s = np.round(rng.random(100), 2)
    y = rng.random(100) < 0.4
    assert mt.roc_auc(s, y) == pytest.approx(oracles.brute_auroc(s.tolist(), y.tolist()), abs=1e-12)
    assert mt.roc_auc_trapezoid(s, y) == pytest.approx(mt.roc_auc(s, y), abs=1e-12)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(0, 20), st.booleans()), min_size=2, max_size=60))
def test_auroc_monotone_invariance(pairs):
    s = np.array([p[0] for p in pairs], dtype=float)
    y = np.array([p[1] for p in pairs])
    if y.all() or not y.any():
        return
    a = mt.roc_auc(s, y)
    assert mt.roc_auc(np.exp(s / 3) - 7, y) == pytest.approx(a, abs=1e-12)
    assert mt.roc_auc_trapezoid(s, y) == pytest.approx(a, abs=1e-12)


def test_ap_examples():
    assert mt.average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert mt.average_precision([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]) == pytest.approx(1 / 4)
    with pytest.raises(InputError):
        mt.average_precision([0.1, 0.2], [0, 0])


def test_ap_threshold_sweep_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        s = np.round(rng.random(50), 1)
        y = rng.random(50) < 0.3
        y[0] = True
        assert mt.average_precision(s, y) == pytest.approx(oracles.brute_ap(s.tolist(), y.tolist()), abs=1e-12)


def test_confusion_and_report():
    y = [0, 1, 2, 2, 1, 0]
    probs = np.eye(3)[[0, 1, 2, 1, 1, 2]] * 0.8 + 0.2 / 3
    report, cm = mt.evaluate(y, probs, ("BN", "LG", "HG"))
    assert cm.total == 6 and cm.counts.tolist() == [[1, 0, 1], [0, 2, 0], [0, 1, 1]]
    assert report.accuracy == pytest.approx(4 / 6)
    assert report.kappa == pytest.approx(oracles.brute_kappa(cm.counts.tolist(), "none"), abs=1e-12)
    assert report.kappa_quadratic == pytest.approx(oracles.brute_kappa(cm.counts.tolist(), "quadratic"), abs=1e-12)
    assert report.auroc is not None and 0 <= report.ap <= 1
    doc = json.loads(report.to_json())
    assert set(doc) >= {"accuracy", "kappa_linear", "kappa_quadratic", "auroc", "ap", "precision", "recall"}
    assert cm.to_csv().splitlines()[0] == "true\\pred,BN,LG,HG"


def test_cancer_score_sums_non_benign():
    p = np.array([[0.2, 0.3, 0.5]])
    assert mt.cancer_score(p)[0] == pytest.approx(0.8)
