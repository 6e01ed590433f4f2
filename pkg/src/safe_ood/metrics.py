"""OOD metrics with OOD as the positive class (higher score = more OOD)."""
from __future__ import annotations

import warnings
from fractions import Fraction

import numpy as np

TPR_LEVEL = Fraction(95, 100)


def _check(id_scores, ood_scores) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(id_scores, dtype=np.float64).reshape(-1)
    b = np.asarray(ood_scores, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValueError("id_scores and ood_scores must both be non-empty")
    return a, b


def auroc(id_scores, ood_scores) -> float:
    """P(ood > id) over all (id, ood) pairs, ties counted one half."""
    a, b = _check(id_scores, ood_scores)
    a = np.sort(a)
    below = np.searchsorted(a, b, side="left")
    below_or_equal = np.searchsorted(a, b, side="right")
    twice_wins = int(below.sum()) + int(below_or_equal.sum())
    return twice_wins / (2 * a.size * b.size)


def fpr95_threshold(ood_scores) -> float:
    """Largest t with fraction(ood >= t) >= 0.95."""
    b = np.sort(np.asarray(ood_scores, dtype=np.float64).reshape(-1))[::-1]
    m = b.size
    k = -(-TPR_LEVEL.numerator * m // TPR_LEVEL.denominator)  # ceil(0.95 m)
    return float(b[k - 1])


def fpr95(id_scores, ood_scores) -> float:
    """Fraction of ID scores at or above the threshold that keeps 95% of OOD scores."""
    a, b = _check(id_scores, ood_scores)
    if b.size < 20:
        warnings.warn(f"fpr95 with only {b.size} OOD scores is coarsely quantised", stacklevel=2)
    t = fpr95_threshold(b)
    return int((a >= t).sum()) / a.size


def msp_score(class_probs) -> np.ndarray:
    """1 - max softmax probability per row."""
    p = np.asarray(class_probs, dtype=np.float64)
    return 1.0 - p.max(axis=-1)
