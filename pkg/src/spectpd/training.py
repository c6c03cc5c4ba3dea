"""SGD training loop, stratified cross-validation folds, classification metrics."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import models, ops
from .errors import ConfigError, NumericalError, ShapeError
from .models import CLASS_PD, NetworkParams, NetworkSpec


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    momentum: float = 0.9
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    batch_size: int = 8
    class_weighting: str = "inverse"  # or "none"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigError(
                f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}"
            )
        if self.class_weighting not in ("inverse", "none"):
            raise ConfigError(f"unknown class weighting {self.class_weighting!r}")


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Logarithmically decayed rate hitting lr_start at epoch 0 and lr_end last."""
    if not 0 <= epoch < config.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {config.epochs})")
    if config.epochs == 1:
        return config.lr_start
    frac = epoch / (config.epochs - 1)
    return float(config.lr_start * (config.lr_end / config.lr_start) ** frac)


def sgd_momentum_step(params, grads, velocity, lr: float, momentum: float):
    """v <- momentum*v - lr*g; p <- p + v, applied across a parameter tree.

    params/grads/velocity are aligned lists of dicts of arrays (the
    NetworkParams layer layout). Updates params and velocity in place and
    returns them. Batchnorm running moments carry no gradient and are skipped.
    """
    for p, g, v in zip(params, grads, velocity):
        for key, grad in g.items():
            if grad.shape != p[key].shape:
                raise ShapeError(
                    f"gradient shape {grad.shape} != parameter {key} shape {p[key].shape}"
                )
            v[key] = momentum * v[key] - lr * grad
            p[key] += v[key]
    return params, velocity


def zero_velocity(params: NetworkParams) -> list[dict[str, np.ndarray]]:
    skip = ("running_mean", "running_var")
    return [
        {k: np.zeros_like(v) for k, v in layer.items() if k not in skip}
        for layer in params.layers
    ]


@dataclass(frozen=True)
class Fold:
    fold_id: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[Fold, ...]
    seed: int
    n_folds: int


def make_fold_plan(labels: dict[str, int], seed: int, n_folds: int = 10) -> FoldPlan:
    """Stratified fold plan: test sets tile the cohort exactly once.

    Within each fold the train/validation/test split is about 80:10:10 (the
    validation set is the next fold's test chunk). Deterministic under seed.
    """
    ids_by_class: dict[int, list[str]] = {}
    for sid in sorted(labels):
        ids_by_class.setdefault(labels[sid], []).append(sid)
    for cls, ids in ids_by_class.items():
        if len(ids) < n_folds:
            raise ConfigError(
                f"class {cls} has {len(ids)} subjects; need >= {n_folds} for {n_folds}-fold CV"
            )
    rng = np.random.default_rng(seed)
    chunks: list[list[str]] = [[] for _ in range(n_folds)]
    for cls in sorted(ids_by_class):
        ids = np.array(ids_by_class[cls])
        rng.shuffle(ids)
        for i, sid in enumerate(ids):
            chunks[i % n_folds].append(str(sid))
    folds = []
    for k in range(n_folds):
        test = chunks[k]
        val = chunks[(k + 1) % n_folds]
        train = [s for i, c in enumerate(chunks) if i not in (k, (k + 1) % n_folds) for s in c]
        folds.append(
            Fold(
                fold_id=k,
                train_ids=tuple(sorted(train)),
                val_ids=tuple(sorted(val)),
                test_ids=tuple(sorted(test)),
            )
        )
    return FoldPlan(folds=tuple(folds), seed=seed, n_folds=n_folds)


@dataclass
class ClassMetrics:
    accuracy: float
    sensitivity: float
    specificity: float
    subject_ids: tuple[str, ...]
    labels: np.ndarray
    predictions: np.ndarray
    scores: np.ndarray  # PD probability per subject


def classification_metrics(labels, predictions, scores, subject_ids=None) -> ClassMetrics:
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    scores = np.asarray(scores, dtype=np.float64)
    if len(labels) == 0:
        raise ConfigError("classification metrics need at least one subject")
    if not len(labels) == len(predictions) == len(scores):
        raise ShapeError("labels, predictions and scores must have equal lengths")
    pos = labels == CLASS_PD
    neg = ~pos
    accuracy = float((predictions == labels).mean())
    sensitivity = float((predictions[pos] == CLASS_PD).mean()) if pos.any() else float("nan")
    specificity = float((predictions[neg] != CLASS_PD).mean()) if neg.any() else float("nan")
    if subject_ids is None:
        subject_ids = tuple(str(i) for i in range(len(labels)))
    return ClassMetrics(
        accuracy=accuracy,
        sensitivity=sensitivity,
        specificity=specificity,
        subject_ids=tuple(subject_ids),
        labels=labels,
        predictions=predictions,
        scores=scores,
    )


def inverse_class_weights(labels: np.ndarray, n_classes: int = 2) -> np.ndarray:
    """w_c = N / (n_classes * N_c), the normalized inverse frequency."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_classes)
    if (counts == 0).any():
        raise ConfigError("every class must be present to compute inverse weights")
    return labels.size / (n_classes * counts.astype(np.float64))


@dataclass
class TrainFoldResult:
    params: NetworkParams  # best-on-validation
    metrics: ClassMetrics  # on the fold's test set
    train_losses: list[float]  # epoch-averaged
    val_accuracies: list[float]
    best_epoch: int


def _predict(spec, params, volumes, batch_size=8):
    probs = []
    for i in range(0, len(volumes), batch_size):
        batch = np.stack(volumes[i : i + batch_size])
        trace = models.forward(spec, params, batch, mode="infer", keep_trace=False)
        probs.append(trace.probs)
    return np.concatenate(probs, axis=0)


def evaluate_subjects(spec, params, dataset, ids, batch_size=8) -> ClassMetrics:
    volumes = [dataset[s][1] for s in ids]
    labels = np.array([dataset[s][0] for s in ids])
    probs = _predict(spec, params, volumes, batch_size)
    return classification_metrics(
        labels, probs.argmax(axis=1), probs[:, CLASS_PD], subject_ids=ids
    )


def train_fold(
    spec: NetworkSpec,
    dataset: dict[str, tuple[int, np.ndarray]],
    fold: Fold,
    config: TrainConfig,
) -> TrainFoldResult:
    """Train on the fold's train split, keep the best-on-validation model,
    and evaluate it once on the test split.

    dataset maps subject id -> (label, volume). Class weights are set
    inversely proportional to class frequency in the training split.
    """
    missing = [s for s in fold.train_ids + fold.val_ids + fold.test_ids if s not in dataset]
    if missing:
        raise ConfigError(f"dataset is missing subjects: {missing[:5]}")
    ss = np.random.SeedSequence((config.seed, fold.fold_id))
    init_seed, shuffle_seed = ss.spawn(2)
    params = models.init_params(spec, seed=init_seed)
    velocity = zero_velocity(params)
    shuffle_rng = np.random.default_rng(shuffle_seed)

    train_labels = np.array([dataset[s][0] for s in fold.train_ids])
    if config.class_weighting == "inverse":
        class_weights = inverse_class_weights(train_labels)
    else:
        class_weights = None

    val_volumes = [dataset[s][1] for s in fold.val_ids]
    val_labels = np.array([dataset[s][0] for s in fold.val_ids])

    best = None  # (val_acc, -val_loss, epoch, params snapshot)
    train_losses: list[float] = []
    val_accuracies: list[float] = []
    train_ids = np.array(fold.train_ids)
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        order = shuffle_rng.permutation(len(train_ids))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = np.stack([dataset[train_ids[i]][1] for i in idx])
            labels = train_labels[idx]
            trace = models.forward(spec, params, batch, mode="train")
            loss, g_logits = ops.weighted_softmax_cross_entropy(
                trace.logits, labels, class_weights
            )
            if not np.isfinite(loss):
                raise NumericalError(
                    f"fold {fold.fold_id}: non-finite training loss at epoch {epoch}"
                )
            _, grads = models.backward(spec, params, trace, g_logits)
            sgd_momentum_step(params.layers, grads, velocity, lr, config.momentum)
            epoch_loss += loss
            n_batches += 1
        params.epoch = epoch + 1
        train_losses.append(epoch_loss / max(n_batches, 1))

        val_probs = _predict(spec, params, val_volumes, config.batch_size)
        val_acc = float((val_probs.argmax(axis=1) == val_labels).mean())
        w = class_weights[val_labels] if class_weights is not None else np.ones(len(val_labels))
        picked = np.maximum(val_probs[np.arange(len(val_labels)), val_labels], 1e-12)
        val_loss = float(-(w * np.log(picked)).sum() / w.sum())
        val_accuracies.append(val_acc)
        key = (val_acc, -val_loss)
        if best is None or key > best[0]:
            best = (key, epoch, params.clone())

    _, best_epoch, best_params = best
    metrics = evaluate_subjects(spec, best_params, dataset, fold.test_ids, config.batch_size)
    return TrainFoldResult(
        params=best_params,
        metrics=metrics,
        train_losses=train_losses,
        val_accuracies=val_accuracies,
        best_epoch=best_epoch,
    )
