"""Model-comparison statistics: ROC/AUC, McNemar's test, Wilcoxon signed-rank.

Tail probabilities come from the error function (chi-square with one degree
of freedom and the normal approximation both reduce to erfc), not from
tables; small-sample Wilcoxon p-values are exact sign enumerations.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError


def chi2_sf_1df(x: float) -> float:
    """Survival function of chi-square with 1 df: P(X >= x) = erfc(sqrt(x/2))."""
    if x < 0:
        raise ValueError(f"chi-square statistic must be >= 0, got {x}")
    return math.erfc(math.sqrt(x / 2.0))


def normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


@dataclass
class RocCurve:
    """Monotone (FPR, TPR) staircase and the trapezoidal area under it."""

    points: list[tuple[float, float]]
    auc: float


@dataclass
class TestResult:
    statistic: float
    p_value: float
    name: str
    n: int
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p-value {self.p_value} outside [0, 1]")


def roc_auc(scores, labels) -> RocCurve:
    """Threshold sweep over unique scores; tied scores cross simultaneously."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if len(scores) != len(labels):
        raise ShapeError("scores and labels must have equal lengths")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ConfigError("ROC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            tp += int(sorted_labels[j] == 1)
            fp += int(sorted_labels[j] == 0)
            j += 1
        points.append((fp / n_neg, tp / n_pos))
        i = j
    auc = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        auc += (x1 - x0) * (y0 + y1) / 2.0
    return RocCurve(points=points, auc=float(auc))


def mcnemar(predictions_a, predictions_b, labels, method: str = "chi2") -> TestResult:
    """Paired comparison of two classifiers via their disagreement counts.

    b = subjects only A got wrong, c = subjects only B got wrong. The default
    is the continuity-corrected chi-square statistic (|b-c|-1)^2/(b+c); the
    exact binomial variant is available via method="exact" (recommended when
    b + c < 25). With b + c = 0 the error patterns are identical and p = 1.
    """
    a = np.asarray(predictions_a)
    bb = np.asarray(predictions_b)
    y = np.asarray(labels)
    if not len(a) == len(bb) == len(y):
        raise ShapeError("paired predictions must align with labels")
    if method not in ("chi2", "exact"):
        raise ConfigError(f"unknown McNemar method {method!r}")
    a_wrong = a != y
    b_wrong = bb != y
    b_count = int((a_wrong & ~b_wrong).sum())
    c_count = int((~a_wrong & b_wrong).sum())
    extra = {"b": b_count, "c": c_count, "method": method}
    if b_count + c_count == 0:
        return TestResult(0.0, 1.0, "mcnemar", len(y), extra)
    if method == "exact":
        n = b_count + c_count
        k = max(b_count, c_count)
        tail = sum(math.comb(n, i) for i in range(k, n + 1)) / 2.0**n
        return TestResult(float(k), min(1.0, 2.0 * tail), "mcnemar-exact", len(y), extra)
    stat = (abs(b_count - c_count) - 1) ** 2 / (b_count + c_count)
    return TestResult(float(stat), chi2_sf_1df(stat), "mcnemar", len(y), extra)


def _signed_ranks(diffs: np.ndarray):
    """Midranks of |d| plus the tie correction term sum(t^3 - t)."""
    absd = np.abs(diffs)
    order = np.argsort(absd, kind="stable")
    ranks = np.empty(len(diffs), dtype=np.float64)
    tie_term = 0.0
    i = 0
    while i < len(diffs):
        j = i
        while j < len(diffs) and absd[order[j]] == absd[order[i]]:
            j += 1
        mid = (i + 1 + j) / 2.0  # average of ranks i+1..j
        ranks[order[i:j]] = mid
        t = j - i
        tie_term += t**3 - t
        i = j
    return ranks, tie_term


EXACT_WILCOXON_MAX_N = 9


def wilcoxon_signed_rank(values_a, values_b) -> TestResult:
    """Two-sided paired Wilcoxon test on values_a - values_b.

    Zero differences are dropped. For n < 10 the null distribution of W+ is
    enumerated exactly over all 2^n sign assignments; for larger n a normal
    approximation with tie correction is used. W = min(W+, W-).
    """
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("need two 1D paired vectors of equal length")
    diffs = a - b
    diffs = diffs[diffs != 0]
    n = len(diffs)
    if n == 0:
        return TestResult(0.0, 1.0, "wilcoxon", 0, {"degenerate": True})
    if n < 5:
        raise ConfigError(f"need >= 5 nonzero differences, got {n}")
    ranks, tie_term = _signed_ranks(diffs)
    w_plus = float(ranks[diffs > 0].sum())
    w_minus = float(ranks[diffs < 0].sum())
    w = min(w_plus, w_minus)
    extra = {"w_plus": w_plus, "w_minus": w_minus}
    if n <= EXACT_WILCOXON_MAX_N:
        total = 0
        le = 0
        ge = 0
        for signs in itertools.product((0.0, 1.0), repeat=n):
            s = float(np.dot(signs, ranks))
            total += 1
            le += s <= w_plus
            ge += s >= w_plus
        p = min(1.0, 2.0 * min(le / total, ge / total))
        return TestResult(w, p, "wilcoxon-exact", n, extra)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term / 48.0
    if var <= 0:
        return TestResult(w, 1.0, "wilcoxon", n, dict(extra, degenerate=True))
    z = (w_plus - mean) / math.sqrt(var)
    p = min(1.0, 2.0 * normal_sf(abs(z)))
    return TestResult(w, p, "wilcoxon", n, dict(extra, z=z))
