"""Learning-rate schedule, SGD step, fold plans, metrics, and the training loop."""

import numpy as np
import pytest

from spectpd import training
from spectpd.errors import ConfigError
from spectpd.training import (
    ClassMetrics,
    TrainConfig,
    classification_metrics,
    inverse_class_weights,
    lr_at,
    make_fold_plan,
    sgd_momentum_step,
    train_fold,
)

from helpers import tiny_network


class TestLrSchedule:
    def test_endpoints_exact(self):
        cfg = TrainConfig(epochs=30)
        assert lr_at(0, cfg) == 1e-4
        assert abs(lr_at(29, cfg) - 1e-6) < 1e-18

    def test_midpoint_of_exponent(self):
        # at the exact midpoint of the exponent the rate is the geometric mean
        cfg = TrainConfig(epochs=30)
        lr14, lr15 = lr_at(14, cfg), lr_at(15, cfg)
        mid = np.sqrt(lr14 * lr15)
        assert abs(mid - 1e-5) / 1e-5 < 1e-9

    def test_monotone_nonincreasing(self):
        cfg = TrainConfig(epochs=12, lr_start=1e-3, lr_end=1e-5)
        rates = [lr_at(e, cfg) for e in range(12)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_epoch_out_of_range_rejected(self):
        cfg = TrainConfig(epochs=5)
        with pytest.raises(ConfigError):
            lr_at(5, cfg)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            TrainConfig(momentum=1.0)
        with pytest.raises(ConfigError):
            TrainConfig(lr_start=1e-6, lr_end=1e-4)


class TestSgdStep:
    def wrap(self, p, g, v):
        return [{"w": p}], [{"w": g}], [{"w": v}]

    def test_plain_sgd_at_zero_momentum(self):
        p, g, v = self.wrap(np.zeros(1), np.ones(1), np.zeros(1))
        sgd_momentum_step(p, g, v, lr=0.1, momentum=0.0)
        assert p[0]["w"][0] == pytest.approx(-0.1)

    def test_velocity_decays_geometrically(self):
        p, g, v = self.wrap(np.zeros(1), np.zeros(1), np.array([1.0]))
        for _ in range(3):
            sgd_momentum_step(p, g, v, lr=0.1, momentum=0.9)
        assert v[0]["w"][0] == pytest.approx(0.9**3)

    def test_quadratic_bowl_convergence(self):
        p = np.array([1.0])
        v = np.zeros(1)
        for _ in range(200):
            g = 2.0 * p  # d/dp of p^2
            sgd_momentum_step([{"w": p}], [{"w": g}], [{"w": v}], lr=0.05, momentum=0.9)
        assert abs(p[0]) < 1e-3


class TestFoldPlan:
    def make_labels(self, n_pd=75, n_nc=25):
        labels = {}
        for i in range(n_pd):
            labels[f"p{i:03d}"] = 1
        for i in range(n_nc):
            labels[f"n{i:03d}"] = 0
        return labels

    def test_test_sets_partition_cohort(self):
        labels = self.make_labels()
        plan = make_fold_plan(labels, seed=1)
        seen = [s for f in plan.folds for s in f.test_ids]
        assert sorted(seen) == sorted(labels)

    def test_stratification_within_one(self):
        labels = self.make_labels()
        plan = make_fold_plan(labels, seed=2)
        for f in plan.folds:
            n_pd = sum(1 for s in f.test_ids if labels[s] == 1)
            n_nc = len(f.test_ids) - n_pd
            assert abs(n_pd - 7.5) <= 0.5 and abs(n_nc - 2.5) <= 0.5
            assert 9 <= len(f.test_ids) <= 11

    def test_splits_disjoint_and_80_10_10(self):
        labels = self.make_labels()
        plan = make_fold_plan(labels, seed=3)
        for f in plan.folds:
            all_ids = set(f.train_ids) | set(f.val_ids) | set(f.test_ids)
            assert len(all_ids) == 100
            assert not set(f.train_ids) & set(f.val_ids)
            assert not set(f.train_ids) & set(f.test_ids)
            assert not set(f.val_ids) & set(f.test_ids)
            assert 78 <= len(f.train_ids) <= 82

    def test_deterministic_under_seed(self):
        labels = self.make_labels()
        assert make_fold_plan(labels, seed=4) == make_fold_plan(labels, seed=4)
        assert make_fold_plan(labels, seed=4) != make_fold_plan(labels, seed=5)

    def test_small_class_rejected(self):
        labels = {f"s{i}": (1 if i < 95 else 0) for i in range(100)}
        with pytest.raises(ConfigError, match="class 0"):
            make_fold_plan(labels, seed=0)


class TestClassMetrics:
    def test_sensitivity_specificity(self):
        labels = np.array([1] * 10 + [0] * 10)
        preds = labels.copy()
        preds[0] = 0  # one PD missed
        m = classification_metrics(labels, preds, np.linspace(0, 1, 20))
        assert m.sensitivity == pytest.approx(0.9)
        assert m.specificity == pytest.approx(1.0)
        assert m.accuracy == pytest.approx(0.95)

    def test_all_pd_predictions(self):
        labels = np.array([1, 1, 0, 0])
        preds = np.ones(4, dtype=int)
        m = classification_metrics(labels, preds, np.ones(4))
        assert m.sensitivity == 1.0 and m.specificity == 0.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(6)
        labels = rng.integers(0, 2, 30)
        preds = rng.integers(0, 2, 30)
        scores = rng.random(30)
        m1 = classification_metrics(labels, preds, scores)
        perm = rng.permutation(30)
        m2 = classification_metrics(labels[perm], preds[perm], scores[perm])
        assert (m1.accuracy, m1.sensitivity, m1.specificity) == (
            m2.accuracy, m2.sensitivity, m2.specificity,
        )

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            classification_metrics([], [], [])

    def test_inverse_weights(self):
        w = inverse_class_weights(np.array([1, 1, 1, 0]))
        assert w[0] == pytest.approx(2.0)  # 4 / (2*1)
        assert w[1] == pytest.approx(4 / 6)


def toy_dataset(n_per_class=12, extents=(8, 8, 8), seed=0):
    """Two constant-intensity classes with mild voxel noise; linearly separable."""
    rng = np.random.default_rng(seed)
    data = {}
    for i in range(n_per_class):
        data[f"a{i:02d}"] = (0, (0.2 + 0.02 * rng.standard_normal(extents)).astype(np.float32))
        data[f"b{i:02d}"] = (1, (0.8 + 0.02 * rng.standard_normal(extents)).astype(np.float32))
    return data


class TestTrainFold:
    def fold(self, dataset):
        ids = sorted(dataset)
        train = tuple(s for s in ids if not s.endswith(("0", "1")))
        val = tuple(s for s in ids if s.endswith("0"))
        test = tuple(s for s in ids if s.endswith("1"))
        return training.Fold(fold_id=0, train_ids=train, val_ids=val, test_ids=test)

    def test_separable_toy_reaches_perfect_accuracy(self):
        dataset = toy_dataset()
        spec = tiny_network()
        cfg = TrainConfig(epochs=5, lr_start=0.3, lr_end=0.05, batch_size=4, seed=7)
        result = train_fold(spec, dataset, self.fold(dataset), cfg)
        assert result.metrics.accuracy == 1.0

    def test_loss_nonincreasing_early(self):
        dataset = toy_dataset(seed=1)
        spec = tiny_network()
        cfg = TrainConfig(epochs=5, lr_start=0.3, lr_end=0.05, batch_size=4, seed=8)
        result = train_fold(spec, dataset, self.fold(dataset), cfg)
        losses = result.train_losses[:5]
        assert all(a >= b - 1e-9 for a, b in zip(losses, losses[1:]))

    def test_deterministic(self):
        dataset = toy_dataset(seed=2)
        spec = tiny_network()
        cfg = TrainConfig(epochs=2, lr_start=0.3, lr_end=0.05, batch_size=4, seed=9)
        r1 = train_fold(spec, dataset, self.fold(dataset), cfg)
        r2 = train_fold(spec, dataset, self.fold(dataset), cfg)
        assert r1.train_losses == r2.train_losses
        for a, b in zip(r1.params.layers, r2.params.layers):
            for k in a:
                np.testing.assert_array_equal(a[k], b[k])

    def test_batchnorm_variant_trains(self):
        dataset = toy_dataset(seed=3)
        spec = tiny_network(batchnorm=True)
        cfg = TrainConfig(epochs=3, lr_start=0.3, lr_end=0.05, batch_size=4, seed=10)
        result = train_fold(spec, dataset, self.fold(dataset), cfg)
        assert result.params.bn_initialized
        assert result.metrics.accuracy >= 0.5
