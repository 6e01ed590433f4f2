import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safe_ood.metrics import auroc, fpr95, fpr95_threshold, msp_score

GRID = [round(0.1 * i, 1) for i in range(11)]
scores = st.lists(st.sampled_from(GRID), min_size=1, max_size=10)


def brute_auroc(id_s, ood_s):
    wins = 0.0
    for a, b in itertools.product(id_s, ood_s):
        wins += 1.0 if b > a else 0.5 if b == a else 0.0
    return wins / (len(id_s) * len(ood_s))


def brute_fpr95(id_s, ood_s):
    # largest candidate threshold that still keeps >= 95% of the OOD scores
    best = None
    for t in sorted(set(id_s) | set(ood_s)):
        if 20 * sum(o >= t for o in ood_s) >= 19 * len(ood_s):
            best = t
    return sum(a >= best for a in id_s) / len(id_s)


def test_auroc_examples():
    assert auroc([0.1, 0.2], [0.8, 0.9]) == 1.0
    assert auroc([0.1, 0.4], [0.3, 0.9]) == 0.75
    x = [0.3, 0.3, 0.5, 0.9]
    assert auroc(x, x) == 0.5


def test_fpr95_examples():
    assert fpr95(np.arange(20) / 100, 1 + np.arange(20) / 100) == 0.0
    ids = np.arange(1, 101)
    ood = np.arange(51, 151)
    assert fpr95_threshold(ood) == 56
    assert fpr95(ids, ood) == 0.45
    x = np.linspace(0, 1, 40)
    assert fpr95(x, x) >= 0.95


def test_empty_inputs_rejected():
    with pytest.raises(ValueError):
        auroc([], [1.0])
    with pytest.raises(ValueError):
        fpr95([1.0], [])


def test_fpr95_quantisation_warning():
    with pytest.warns(UserWarning, match="quantised"):
        fpr95([0.1, 0.2], [0.5] * 19)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fpr95([0.1, 0.2], [0.5] * 20)


@settings(max_examples=300, deadline=None)
@given(scores, scores)
def test_oracle_equivalence(id_s, ood_s):
    assert auroc(id_s, ood_s) == brute_auroc(id_s, ood_s)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert fpr95(id_s, ood_s) == brute_fpr95(id_s, ood_s)


@settings(max_examples=100, deadline=None)
@given(scores, scores)
def test_auroc_monotone_transform_invariance(id_s, ood_s):
    f = lambda v: np.exp(3 * np.asarray(v)) - 7.0
    assert auroc(f(id_s), f(ood_s)) == auroc(id_s, ood_s)


@settings(max_examples=100, deadline=None)
@given(scores, scores)
def test_auroc_complement(id_s, ood_s):
    assert auroc(id_s, ood_s) == pytest.approx(1 - auroc(ood_s, id_s), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(scores, scores, st.sampled_from(GRID))
def test_fpr95_monotone_in_added_id_score(id_s, ood_s, extra):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        t = fpr95_threshold(ood_s)
        if extra >= t:
            assert fpr95(id_s + [extra], ood_s) >= fpr95(id_s, ood_s)


def test_msp_score():
    assert msp_score([[0.0, 1.0, 0.0]])[0] == 0.0
    assert msp_score([[1 / 3] * 3])[0] == pytest.approx(2 / 3)
    assert msp_score(np.full((2, 4), 0.25)).tolist() == [0.75, 0.75]
