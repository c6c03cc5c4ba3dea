"""ROC/AUC, McNemar, and Wilcoxon tests against independent oracles."""

import itertools

import numpy as np
import pytest
import scipy.stats

from spectpd.errors import ConfigError
from spectpd.stats import (
    chi2_sf_1df,
    mcnemar,
    roc_auc,
    wilcoxon_signed_rank,
)


def mann_whitney_auc(scores, labels):
    """Pair-counting oracle: ties count one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


class TestRocAuc:
    def test_perfect_separation(self):
        curve = roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
        assert curve.auc == 1.0

    def test_identical_scores_chance(self):
        curve = roc_auc([0.5] * 8, [0, 1] * 4)
        assert curve.auc == pytest.approx(0.5)

    def test_worked_example(self):
        curve = roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        assert curve.auc == pytest.approx(0.75)

    def test_curve_monotone(self):
        rng = np.random.default_rng(0)
        scores = rng.random(40)
        labels = rng.integers(0, 2, 40)
        labels[:2] = [0, 1]
        curve = roc_auc(scores, labels)
        xs = [p[0] for p in curve.points]
        ys = [p[1] for p in curve.points]
        assert xs == sorted(xs) and ys == sorted(ys)
        assert curve.points[0] == (0.0, 0.0) and curve.points[-1] == (1.0, 1.0)

    def test_matches_mann_whitney_on_random_vectors(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(4, 30))
            scores = np.round(rng.random(n), 2)  # rounding forces ties
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            auc = roc_auc(scores, labels).auc
            assert auc == pytest.approx(mann_whitney_auc(scores, labels), abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(ConfigError):
            roc_auc([0.1, 0.2], [1, 1])


class TestMcNemar:
    def run_counts(self, b, c):
        """Construct paired predictions with exactly b A-only and c B-only errors."""
        n = b + c + 5
        labels = np.zeros(n, dtype=int)
        pred_a = np.zeros(n, dtype=int)
        pred_b = np.zeros(n, dtype=int)
        pred_a[:b] = 1  # A wrong, B right
        pred_b[b : b + c] = 1  # B wrong, A right
        return pred_a, pred_b, labels

    def test_hand_computed_example(self):
        pred_a, pred_b, labels = self.run_counts(10, 2)
        r = mcnemar(pred_a, pred_b, labels)
        assert r.statistic == pytest.approx(49 / 12)
        assert r.p_value == pytest.approx(0.0433, abs=0.002)
        assert r.extra["b"] == 10 and r.extra["c"] == 2

    def test_symmetric_disagreement_statistic(self):
        pred_a, pred_b, labels = self.run_counts(4, 4)
        r = mcnemar(pred_a, pred_b, labels)
        # with continuity correction the statistic is exactly 1/(b+c)
        assert r.statistic == pytest.approx(1.0 / 8.0)
        assert r.p_value > 0.5

    def test_identical_error_patterns(self):
        pred_a, pred_b, labels = self.run_counts(0, 0)
        r = mcnemar(pred_a, pred_b, labels)
        assert r.statistic == 0.0 and r.p_value == 1.0

    def test_symmetry_in_model_order(self):
        pred_a, pred_b, labels = self.run_counts(7, 3)
        r1 = mcnemar(pred_a, pred_b, labels)
        r2 = mcnemar(pred_b, pred_a, labels)
        assert r1.statistic == r2.statistic and r1.p_value == r2.p_value

    def test_exact_variant_matches_binomial(self):
        pred_a, pred_b, labels = self.run_counts(10, 2)
        r = mcnemar(pred_a, pred_b, labels, method="exact")
        # two-sided binomial tail: 2 * P(X >= 10 | n=12, p=1/2)
        expected = 2 * sum(
            scipy.stats.binom.pmf(k, 12, 0.5) for k in range(10, 13)
        )
        assert r.p_value == pytest.approx(expected, rel=1e-9)

    def test_chi2_sf_against_scipy(self):
        for x in (0.1, 1.0, 3.84, 10.0):
            assert chi2_sf_1df(x) == pytest.approx(scipy.stats.chi2.sf(x, 1), rel=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(Exception):
            mcnemar([0, 1], [0], [0, 1])


class TestWilcoxon:
    def test_identical_vectors_degenerate(self):
        a = np.arange(8.0)
        r = wilcoxon_signed_rank(a, a)
        assert r.p_value == 1.0 and r.extra.get("degenerate")

    def test_swap_symmetry(self):
        rng = np.random.default_rng(2)
        a = rng.random(12)
        b = rng.random(12)
        r1 = wilcoxon_signed_rank(a, b)
        r2 = wilcoxon_signed_rank(b, a)
        assert r1.statistic == r2.statistic
        assert r1.p_value == pytest.approx(r2.p_value, abs=1e-12)

    def test_exact_enumeration_n6(self):
        a = np.array([0.92, 0.81, 0.75, 0.68, 0.55, 0.41])
        b = np.array([0.60, 0.62, 0.71, 0.52, 0.44, 0.50])
        r = wilcoxon_signed_rank(a, b)
        assert r.name == "wilcoxon-exact"
        # independent enumeration oracle over all 2^6 sign assignments
        d = a - b
        ranks = scipy.stats.rankdata(np.abs(d))
        w_plus = ranks[d > 0].sum()
        le = ge = 0
        for signs in itertools.product((0, 1), repeat=6):
            s = float(np.dot(signs, ranks))
            le += s <= w_plus
            ge += s >= w_plus
        expected = min(1.0, 2 * min(le / 64, ge / 64))
        assert r.p_value == pytest.approx(expected, abs=1e-12)

    def test_exact_matches_scipy_without_ties(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            a = rng.random(8)
            b = rng.random(8)
            r = wilcoxon_signed_rank(a, b)
            ref = scipy.stats.wilcoxon(a, b, mode="exact")
            assert r.p_value == pytest.approx(ref.pvalue, abs=1e-9)

    def test_normal_approx_matches_scipy_large_n(self):
        rng = np.random.default_rng(4)
        a = rng.random(40)
        b = a + rng.normal(0.1, 0.2, 40)
        r = wilcoxon_signed_rank(a, b)
        ref = scipy.stats.wilcoxon(a, b, mode="approx", correction=False)
        assert r.p_value == pytest.approx(ref.pvalue, rel=1e-9)

    def test_affine_transform_invariance(self):
        # the test is rank-based in the paired differences, so any positive
        # affine transform of both vectors leaves statistic and p unchanged
        rng = np.random.default_rng(5)
        a = rng.random(15)
        b = rng.random(15)
        r1 = wilcoxon_signed_rank(a, b)
        r2 = wilcoxon_signed_rank(3.2 * a + 7.0, 3.2 * b + 7.0)
        assert r1.statistic == r2.statistic
        assert r1.p_value == pytest.approx(r2.p_value, abs=1e-12)

    def test_too_few_nonzero_rejected(self):
        with pytest.raises(ConfigError):
            wilcoxon_signed_rank(np.array([1.0, 2, 3, 4]), np.array([1.0, 2, 3, 5]))
