"""Run-directory orchestration: each command reads/writes artifacts under one
output directory, stamped with a manifest carrying the config digest, seed,
and code version. Reruns with identical config and seed produce byte-identical
artifacts.

Layout:
    cohort/         volumes, masks, manifest.jsonl
    checkpoints/    <model>/fold<k>.ckpt
    reports/        fold metrics, per-subject predictions, SBR features
    attributions/   <model>/<method>/<subject>.raw/.json
    interp/         Dice report, aggregates, MAE fields, mean heatmaps
    stats/          ROC/AUC, McNemar, Wilcoxon results
    selection/      model recommendation with decision trace
    exports/        graymaps and CSV tables
    manifests/      one JSON manifest per command
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, attribution, interp, models, phantom, sbr, stats, training
from .errors import ConfigError, LockError, MissingArtifactError
from .models import CLASS_PD, MODEL_NAMES
from .phantom import PhantomConfig, Volume, load_cohort, load_volume, save_volume
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "run"
    grid: str = "full"
    cohort: int = 607
    models: tuple[str, ...] = MODEL_NAMES
    methods: tuple[str, ...] = attribution.METHODS
    topk: tuple[float, ...] = (10.0, 1.0)
    alpha: float = 0.05
    folds: int = 10
    epochs: int = 30
    batch_size: int = 8
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    momentum: float = 0.9
    workers: int = 0  # 0 = one per core, capped at the fold count
    noise_level: float = 0.05
    depletion_range: tuple[float, float] = (0.25, 0.6)
    gain_range: tuple[float, float] = (3.5, 4.5)
    asymmetry_probability: float = 0.5
    blur_fwhm_mm: float = 8.0
    shap_samples: int = 2048
    shap_block: int = 4
    svm_c: float = 1.0
    select_method: str = "guided_backprop"
    select_k: float = 1.0

    def __post_init__(self):
        if self.grid not in phantom.GRIDS:
            raise ConfigError(f"unknown grid {self.grid!r}")
        for m in self.models:
            if m not in MODEL_NAMES:
                raise ConfigError(f"unknown model tag {m!r}")
        for m in self.methods:
            if m not in attribution.METHODS:
                raise ConfigError(f"unknown method {m!r}")
        for k in self.topk:
            if not 0 < k <= 100:
                raise ConfigError(f"top-k percentage {k} outside (0, 100]")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha {self.alpha} outside (0, 1)")
        if self.select_method not in attribution.METHODS:
            raise ConfigError(f"unknown select method {self.select_method!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def phantom_config(self) -> PhantomConfig:
        return PhantomConfig(
            cohort_size=self.cohort,
            grid=self.grid,
            striatal_gain_range=self.gain_range,
            depletion_range=self.depletion_range,
            asymmetry_probability=self.asymmetry_probability,
            noise_level=self.noise_level,
            blur_fwhm_mm=self.blur_fwhm_mm,
            seed=self.seed,
        )

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            momentum=self.momentum,
            lr_start=self.lr_start,
            lr_end=self.lr_end,
            batch_size=self.batch_size,
            seed=seed,
        )


_TUPLE_FIELDS = {"models", "methods", "topk", "depletion_range", "gain_range"}


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Config file values (JSON object) overridden by CLI flag values."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            values = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"{p}: config must be a JSON object")
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for k in _TUPLE_FIELDS & set(values):
        values[k] = tuple(values[k])
    return RunConfig(**values)


class RunPaths:
    def __init__(self, out):
        self.out = Path(out)
        self.cohort = self.out / "cohort"
        self.checkpoints = self.out / "checkpoints"
        self.reports = self.out / "reports"
        self.attributions = self.out / "attributions"
        self.interp = self.out / "interp"
        self.stats = self.out / "stats"
        self.selection = self.out / "selection"
        self.exports = self.out / "exports"
        self.manifests = self.out / "manifests"

    def require(self, path: Path, produced_by: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(
                f"missing artifact {path}; run `spectpd {produced_by}` first"
            )
        return path


@contextmanager
def run_lock(out_dir):
    """One command at a time per run directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(
            f"{lock} exists; another command is running in this directory "
            "(remove the file if that command crashed)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def write_manifest(paths: RunPaths, command: str, config: RunConfig, outputs, extra=None):
    paths.manifests.mkdir(parents=True, exist_ok=True)

    def rel(o) -> str:
        p = Path(o)
        try:
            return str(p.relative_to(paths.out))
        except ValueError:
            return str(p)

    doc = {
        "command": command,
        "version": __version__,
        "seed": config.seed,
        "config_digest": config.digest(),
        "config": config.to_dict(),
        "outputs": sorted(rel(o) for o in outputs),
        "extra": extra or {},
    }
    path = paths.manifests / f"{command}.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return path


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# generate-data
# ---------------------------------------------------------------------------


def step_generate(config: RunConfig) -> dict:
    paths = RunPaths(config.out)
    records = phantom.build_cohort(config.phantom_config(), paths.cohort)
    n_pd = sum(1 for r in records if r.label == "PD")
    extra = {"n_subjects": len(records), "n_pd": n_pd, "n_nc": len(records) - n_pd}
    write_manifest(paths, "generate-data", config, [paths.cohort / "manifest.jsonl"], extra)
    return extra


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _cohort_labels(records) -> dict[str, int]:
    return {r.subject_id: (CLASS_PD if r.label == "PD" else 0) for r in records}


def _load_dataset(paths: RunPaths, records) -> dict[str, tuple[int, np.ndarray]]:
    labels = _cohort_labels(records)
    return {
        r.subject_id: (labels[r.subject_id], load_volume(paths.cohort / r.volume).data)
        for r in records
    }


def _model_seed(base_seed: int, model: str) -> int:
    # stable per-model offset so every (model, fold) trains on its own stream
    return base_seed * 1009 + MODEL_NAMES.index(model)


def _train_fold_task(args):
    model, grid, cohort_dir, fold, tc_dict = args
    paths = RunPaths(Path(cohort_dir).parent)
    records = load_cohort(paths.cohort)
    dataset = _load_dataset(paths, records)
    spec = models.build_network(model, grid)
    result = training.train_fold(spec, dataset, fold, TrainConfig(**tc_dict))
    return fold.fold_id, result


def _run_folds(config: RunConfig, model: str, plan) -> list:
    tc = config.train_config(_model_seed(config.seed, model))
    paths = RunPaths(config.out)
    tasks = [
        (model, config.grid, str(paths.cohort), fold, dataclasses.asdict(tc))
        for fold in plan.folds
    ]
    workers = config.workers or min(os.cpu_count() or 1, len(tasks))
    workers = min(workers, len(tasks))
    if workers <= 1:
        return [_train_fold_task(t) for t in tasks]
    import multiprocessing as mp

    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")
    ctx = mp.get_context("spawn")
    with ctx.Pool(processes=workers) as pool:
        return pool.map(_train_fold_task, tasks)


def step_train(config: RunConfig) -> dict:
    paths = RunPaths(config.out)
    paths.require(paths.cohort / "manifest.jsonl", "generate-data")
    records = load_cohort(paths.cohort)
    labels = _cohort_labels(records)
    plan = training.make_fold_plan(labels, seed=config.seed, n_folds=config.folds)
    paths.reports.mkdir(parents=True, exist_ok=True)
    outputs = []
    summary = {}
    for model in config.models:
        results = sorted(_run_folds(config, model, plan))
        ckpt_dir = paths.checkpoints / model
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        spec = models.build_network(model, config.grid)
        fold_rows = []
        pred_rows = []
        for fold_id, result in results:
            ckpt = ckpt_dir / f"fold{fold_id}.ckpt"
            models.save_checkpoint(spec, result.params, ckpt)
            outputs.append(ckpt)
            m = result.metrics
            fold_rows.append(
                {
                    "fold": fold_id,
                    "test_ids": list(m.subject_ids),
                    "accuracy": m.accuracy,
                    "sensitivity": m.sensitivity,
                    "specificity": m.specificity,
                    "best_epoch": result.best_epoch,
                }
            )
            for sid, lab, pred, score in zip(m.subject_ids, m.labels, m.predictions, m.scores):
                pred_rows.append((sid, fold_id, int(lab), int(pred), float(score)))
        folds_path = paths.reports / f"folds_{model}.jsonl"
        with open(folds_path, "w") as fh:
            for row in fold_rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        pred_path = paths.reports / f"predictions_{model}.csv"
        _write_predictions(pred_path, pred_rows)
        outputs += [folds_path, pred_path]
        accs = [r["accuracy"] for r in fold_rows]
        summary[model] = {
            "mean_accuracy": float(np.mean(accs)),
            "sd_accuracy": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
        }
    write_manifest(paths, "train", config, outputs, summary)
    return summary


def _write_predictions(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "fold", "label", "prediction", "pd_score"])
        for sid, fold, lab, pred, score in sorted(rows):
            w.writerow([sid, fold, lab, pred, f"{score:.9g}"])


def read_predictions(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {
                "subject_id": r["subject_id"],
                "fold": int(r["fold"]),
                "label": int(r["label"]),
                "prediction": int(r["prediction"]),
                "pd_score": float(r["pd_score"]),
            }
            for r in csv.DictReader(fh)
        ]


# ---------------------------------------------------------------------------
# baseline (SBR + SVM)
# ---------------------------------------------------------------------------


def step_baseline(config: RunConfig) -> dict:
    paths = RunPaths(config.out)
    paths.require(paths.cohort / "manifest.jsonl", "generate-data")
    records = load_cohort(paths.cohort)
    labels = _cohort_labels(records)
    masks = sbr.default_roi_masks(config.grid)
    features = {}
    paths.reports.mkdir(parents=True, exist_ok=True)
    feat_path = paths.reports / "sbr_features.csv"
    with open(feat_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["subject_id", "left_caudate", "right_caudate", "left_putamen", "right_putamen", "label"]
        )
        for r in records:
            vol = load_volume(paths.cohort / r.volume)
            smoothed = sbr.gaussian_smooth_3d(vol, 6.0)
            img = sbr.hottest_slice_average(smoothed)
            f = sbr.compute_sbr(img, masks)
            features[r.subject_id] = f.as_array()
            w.writerow(
                [r.subject_id] + [f"{v:.9g}" for v in f.as_array()] + [r.label]
            )
    plan = training.make_fold_plan(labels, seed=config.seed, n_folds=config.folds)
    fold_rows = []
    pred_rows = []
    for fold in plan.folds:
        X_train = np.array([features[s] for s in fold.train_ids])
        y_train = np.array([labels[s] for s in fold.train_ids])
        model = sbr.svm_train(X_train, y_train, C=config.svm_c)
        X_test = np.array([features[s] for s in fold.test_ids])
        y_test = np.array([labels[s] for s in fold.test_ids])
        preds, margins = sbr.svm_predict(model, X_test)
        m = training.classification_metrics(y_test, preds, margins, subject_ids=fold.test_ids)
        fold_rows.append(
            {
                "fold": fold.fold_id,
                "test_ids": list(fold.test_ids),
                "accuracy": m.accuracy,
                "sensitivity": m.sensitivity,
                "specificity": m.specificity,
            }
        )
        for sid, lab, pred, score in zip(m.subject_ids, m.labels, m.predictions, m.scores):
            pred_rows.append((sid, fold.fold_id, int(lab), int(pred), float(score)))
    folds_path = paths.reports / "folds_svm.jsonl"
    with open(folds_path, "w") as fh:
        for row in fold_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    pred_path = paths.reports / "predictions_svm.csv"
    _write_predictions(pred_path, pred_rows)
    accs = [r["accuracy"] for r in fold_rows]
    extra = {"mean_accuracy": float(np.mean(accs))}
    write_manifest(paths, "baseline", config, [feat_path, folds_path, pred_path], extra)
    return extra


# ---------------------------------------------------------------------------
# attribute
# ---------------------------------------------------------------------------


def _attribute_fold_task(args) -> list[str]:
    """Attribute every requested test subject of one (model, fold); returns sidecar paths."""
    out_dir, model, fold, fold_subjects, cfg_dict = args
    config = RunConfig(**{k: tuple(v) if k in _TUPLE_FIELDS else v for k, v in cfg_dict.items()})
    paths = RunPaths(out_dir)
    records = {r.subject_id: r for r in load_cohort(paths.cohort)}
    ckpt_path = paths.checkpoints / model / f"fold{fold.fold_id}.ckpt"
    spec, params = models.load_checkpoint(ckpt_path)
    ckpt_digest = file_digest(ckpt_path)
    reference = attribution.make_reference(spec, params)
    outputs = []
    for sid in fold_subjects:
        vol = load_volume(paths.cohort / records[sid].volume)
        trace = models.forward(spec, params, vol.data[None], keep_trace=False)
        target = int(trace.logits[0].argmax())
        for method in config.methods:
            amap = attribution.compute_attention(
                method, spec, params, vol, target,
                reference=reference, subject_id=sid,
                shap_samples=config.shap_samples,
                shap_block=(config.shap_block,) * 3,
                seed=config.seed,
            )
            base = paths.attributions / model / method / sid
            save_volume(
                Volume(
                    data=amap.data.astype(np.float32),
                    voxel_mm=vol.voxel_mm,
                    meta={
                        "method": method,
                        "model": model,
                        "target_class": target,
                        "true_label": records[sid].label,
                        "fold": fold.fold_id,
                        "checkpoint_digest": ckpt_digest,
                        **{k: v for k, v in amap.meta.items() if _is_jsonable(v)},
                    },
                ),
                base,
            )
            outputs.append(str(base.with_suffix(".json")))
    return outputs


def step_attribute(config: RunConfig, subjects: list[str] | None = None) -> dict:
    paths = RunPaths(config.out)
    paths.require(paths.cohort / "manifest.jsonl", "generate-data")
    records = {r.subject_id: r for r in load_cohort(paths.cohort)}
    labels = _cohort_labels(records.values())
    plan = training.make_fold_plan(labels, seed=config.seed, n_folds=config.folds)
    tasks = []
    for model in config.models:
        ckpt_dir = paths.checkpoints / model
        paths.require(ckpt_dir, "train")
        for fold in plan.folds:
            fold_subjects = [s for s in fold.test_ids if subjects is None or s in subjects]
            if not fold_subjects:
                continue
            paths.require(ckpt_dir / f"fold{fold.fold_id}.ckpt", "train")
            tasks.append((str(paths.out), model, fold, fold_subjects, config.to_dict()))
    workers = config.workers or min(os.cpu_count() or 1, len(tasks))
    workers = min(workers, max(len(tasks), 1))
    if workers <= 1 or len(tasks) <= 1:
        results = [_attribute_fold_task(t) for t in tasks]
    else:
        import multiprocessing as mp

        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, "1")
        ctx = mp.get_context("spawn")
        with ctx.Pool(processes=workers) as pool:
            results = pool.map(_attribute_fold_task, tasks)
    outputs = [o for chunk in results for o in chunk]
    extra = {"n_maps": len(outputs)}
    write_manifest(paths, "attribute", config, outputs, extra)
    return extra


def _is_jsonable(v) -> bool:
    return isinstance(v, (str, int, float, bool, list, dict, type(None)))


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def step_evaluate(config: RunConfig) -> dict:
    paths = RunPaths(config.out)
    paths.require(paths.cohort / "manifest.jsonl", "generate-data")
    paths.require(paths.attributions, "attribute")
    records = {r.subject_id: r for r in load_cohort(paths.cohort)}
    labels = _cohort_labels(records.values())
    plan = training.make_fold_plan(labels, seed=config.seed, n_folds=config.folds)
    fold_of = {s: f.fold_id for f in plan.folds for s in f.test_ids}
    interp_records: list[interp.InterpRecord] = []
    gt_cache: dict[str, tuple] = {}
    map_masks: dict[tuple, list] = {}
    gt_masks: dict[tuple, list] = {}
    k_heat = min(config.topk)
    outputs = []
    for model in config.models:
        for method in config.methods:
            method_dir = paths.attributions / model / method
            if not method_dir.exists():
                raise MissingArtifactError(
                    f"missing attention maps {method_dir}; run `spectpd attribute` first"
                )
            for sid in sorted(records):
                base = method_dir / sid
                if not base.with_suffix(".json").exists():
                    continue
                rec = records[sid]
                if sid not in gt_cache:
                    vol = load_volume(paths.cohort / rec.volume)
                    img = interp.slice_average(vol.data)
                    gt = interp.segment_ground_truth(img, rec.label)
                    gt_cache[sid] = (img, gt)
                _, gt = gt_cache[sid]
                amap = load_volume(base)
                map_img = interp.slice_average(amap.data)
                if not gt.data.any():
                    for k in config.topk:
                        interp_records.append(
                            interp.InterpRecord(
                                sid, model, method, fold_of[sid], k, 0.0,
                                excluded=True, reason="empty ground truth",
                            )
                        )
                    continue
                for k in config.topk:
                    pred = interp.topk_binarize(map_img, k)
                    d = interp.dice(pred, gt)
                    interp_records.append(
                        interp.InterpRecord(sid, model, method, fold_of[sid], k, d)
                    )
                    if k == k_heat:
                        key = (model, method, rec.label)
                        map_masks.setdefault(key, []).append(pred)
                        gt_masks.setdefault(key, []).append(gt)
    paths.interp.mkdir(parents=True, exist_ok=True)
    report_path = paths.interp / "report.csv"
    with open(report_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "model", "method", "fold", "k_percent", "dice", "excluded", "reason"])
        for r in interp_records:
            w.writerow(
                [r.subject_id, r.model, r.method, r.fold, f"{r.k_percent:g}",
                 f"{r.dice:.9g}", int(r.excluded), r.reason]
            )
    agg = interp.aggregate_dice(interp_records)
    agg_path = paths.interp / "aggregate.csv"
    with open(agg_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "method", "k_percent", "dice_mean", "dice_sd", "n"])
        for (model, method, k), v in agg.items():
            w.writerow([model, method, f"{k:g}", f"{v['mean']:.9g}", f"{v['sd']:.9g}", v["n"]])
    outputs += [report_path, agg_path]
    grid = phantom.GRIDS[config.grid]
    for (model, method, label), preds in sorted(map_masks.items()):
        gts = gt_masks[(model, method, label)]
        mae_field, mae_mean = interp.mae_map(preds, gts)
        heat = interp.mean_segmented_heatmap(preds)
        base = paths.interp / "heatmaps" / model / f"{method}_{label}_k{k_heat:g}"
        save_volume(
            Volume(mae_field.astype(np.float32), grid.voxel_mm[1:],
                   {"kind": "mae", "mean": mae_mean, "n": len(preds)}),
            Path(str(base) + "_mae"),
        )
        save_volume(
            Volume(heat.data.astype(np.float32), grid.voxel_mm[1:],
                   {"kind": "mean-heatmap", "n": len(preds)}),
            Path(str(base) + "_heatmap"),
        )
        outputs.append(Path(str(base) + "_mae.json"))
    extra = {
        "n_records": len(interp_records),
        "n_excluded": sum(1 for r in interp_records if r.excluded),
    }
    write_manifest(paths, "evaluate", config, outputs, extra)
    return extra


def read_interp_report(path) -> list[interp.InterpRecord]:
    with open(path, newline="") as fh:
        return [
            interp.InterpRecord(
                subject_id=r["subject_id"],
                model=r["model"],
                method=r["method"],
                fold=int(r["fold"]),
                k_percent=float(r["k_percent"]),
                dice=float(r["dice"]),
                excluded=bool(int(r["excluded"])),
                reason=r["reason"],
            )
            for r in csv.DictReader(fh)
        ]


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------


def step_stats(config: RunConfig) -> dict:
    paths = RunPaths(config.out)
    report: dict = {"roc": {}, "mcnemar": [], "wilcoxon_methods": [], "wilcoxon_models": []}
    preds = {}
    for model in list(config.models) + ["svm"]:
        path = paths.reports / f"predictions_{model}.csv"
        if model == "svm" and not path.exists():
            continue
        paths.require(path, "train" if model != "svm" else "baseline")
        preds[model] = {r["subject_id"]: r for r in read_predictions(path)}
    for model, rows in preds.items():
        labels = [r["label"] for r in rows.values()]
        scores = [r["pd_score"] for r in rows.values()]
        curve = stats.roc_auc(scores, labels)
        report["roc"][model] = {"auc": curve.auc, "n_points": len(curve.points)}
    model_list = sorted(preds)
    for i, a in enumerate(model_list):
        for b in model_list[i + 1 :]:
            shared = sorted(set(preds[a]) & set(preds[b]))
            r = stats.mcnemar(
                [preds[a][s]["prediction"] for s in shared],
                [preds[b][s]["prediction"] for s in shared],
                [preds[a][s]["label"] for s in shared],
            )
            report["mcnemar"].append(
                {"a": a, "b": b, "statistic": r.statistic, "p_value": r.p_value, **r.extra}
            )
    interp_path = paths.interp / "report.csv"
    if interp_path.exists():
        records = [
            r for r in read_interp_report(interp_path)
            if not r.excluded and r.k_percent == config.select_k
        ]
        by_mm: dict[tuple, dict[str, float]] = {}
        for r in records:
            by_mm.setdefault((r.model, r.method), {})[r.subject_id] = r.dice
        for model in config.models:
            base = by_mm.get((model, config.select_method))
            if not base:
                continue
            for method in config.methods:
                if method == config.select_method:
                    continue
                other = by_mm.get((model, method), {})
                shared = sorted(set(base) & set(other))
                if len(shared) < 5:
                    continue
                r = stats.wilcoxon_signed_rank(
                    np.array([base[s] for s in shared]),
                    np.array([other[s] for s in shared]),
                )
                report["wilcoxon_methods"].append(
                    {
                        "model": model,
                        "a": config.select_method,
                        "b": method,
                        "statistic": r.statistic,
                        "p_value": r.p_value,
                        "n": r.n,
                    }
                )
        for i, a in enumerate(config.models):
            for b in config.models[i + 1 :]:
                da = by_mm.get((a, config.select_method), {})
                db = by_mm.get((b, config.select_method), {})
                shared = sorted(set(da) & set(db))
                if len(shared) < 5:
                    continue
                r = stats.wilcoxon_signed_rank(
                    np.array([da[s] for s in shared]), np.array([db[s] for s in shared])
                )
                report["wilcoxon_models"].append(
                    {"a": a, "b": b, "statistic": r.statistic, "p_value": r.p_value, "n": r.n}
                )
    paths.stats.mkdir(parents=True, exist_ok=True)
    out_path = paths.stats / "report.json"
    out_path.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    write_manifest(paths, "stats", config, [out_path], {"n_models": len(preds)})
    return report


# ---------------------------------------------------------------------------
# select-model
# ---------------------------------------------------------------------------


@dataclass
class ModelSelectionReport:
    recommended: str
    ranking: list[tuple[str, float]]
    steps: list[dict]

    def to_dict(self) -> dict:
        return {
            "recommended": self.recommended,
            "ranking": [[m, a] for m, a in self.ranking],
            "steps": self.steps,
        }


def select_model(
    class_predictions: dict[str, dict[str, dict]],
    interp_records: list[interp.InterpRecord],
    alpha: float = 0.05,
    method: str = "guided_backprop",
    k_percent: float = 1.0,
) -> ModelSelectionReport:
    """Codified interpreted-feedback selection procedure.

    1. Rank models by pooled test accuracy. 2. If the top two are not
    significantly different under McNemar (p >= alpha), compare their
    per-subject Dice for the designated method with a Wilcoxon signed-rank
    test and recommend the significantly better interpreter. 3. Otherwise the
    accuracy leader wins; exact ties break lexicographically.
    """
    if len(class_predictions) < 2:
        raise ConfigError("model selection needs at least 2 models with reports")
    steps = []
    ranking = []
    for model, rows in class_predictions.items():
        acc = float(np.mean([r["prediction"] == r["label"] for r in rows.values()]))
        ranking.append((model, acc))
    ranking.sort(key=lambda t: (-t[1], t[0]))
    steps.append({"step": "rank_by_accuracy", "ranking": [[m, a] for m, a in ranking]})
    (top, top_acc), (second, second_acc) = ranking[0], ranking[1]
    shared = sorted(set(class_predictions[top]) & set(class_predictions[second]))
    mc = stats.mcnemar(
        [class_predictions[top][s]["prediction"] for s in shared],
        [class_predictions[second][s]["prediction"] for s in shared],
        [class_predictions[top][s]["label"] for s in shared],
    )
    steps.append(
        {
            "step": "mcnemar_top_two",
            "a": top,
            "b": second,
            "p_value": mc.p_value,
            "alpha": alpha,
            "significant": mc.p_value < alpha,
        }
    )
    if mc.p_value < alpha and top_acc != second_acc:
        steps.append({"step": "decision", "reason": "significantly better accuracy", "model": top})
        return ModelSelectionReport(recommended=top, ranking=ranking, steps=steps)
    dice_by_model: dict[str, dict[str, float]] = {}
    for r in interp_records:
        if r.excluded or r.method != method or r.k_percent != k_percent:
            continue
        dice_by_model.setdefault(r.model, {})[r.subject_id] = r.dice
    da, db = dice_by_model.get(top), dice_by_model.get(second)
    if not da or not db:
        raise MissingArtifactError(
            f"model selection reached the interpretation step but Dice records for "
            f"method {method!r} at top {k_percent:g}% are missing; run "
            "`spectpd attribute` and `spectpd evaluate` first"
        )
    shared_d = sorted(set(da) & set(db))
    try:
        wl = stats.wilcoxon_signed_rank(
            np.array([da[s] for s in shared_d]), np.array([db[s] for s in shared_d])
        )
    except ConfigError as exc:
        raise MissingArtifactError(
            f"model selection reached the interpretation step but the paired Dice "
            f"records for {top} vs {second} are insufficient ({exc}); run "
            "`spectpd attribute` and `spectpd evaluate` over more subjects"
        ) from exc
    mean_a = float(np.mean([da[s] for s in shared_d]))
    mean_b = float(np.mean([db[s] for s in shared_d]))
    steps.append(
        {
            "step": "wilcoxon_interpretation",
            "method": method,
            "k_percent": k_percent,
            "a": top,
            "b": second,
            "dice_mean_a": mean_a,
            "dice_mean_b": mean_b,
            "p_value": wl.p_value,
            "alpha": alpha,
            "significant": wl.p_value < alpha,
        }
    )
    if wl.p_value < alpha and mean_a != mean_b:
        winner = top if mean_a > mean_b else second
        steps.append(
            {"step": "decision", "reason": "significantly better interpretation Dice", "model": winner}
        )
        return ModelSelectionReport(recommended=winner, ranking=ranking, steps=steps)
    tie_note = "accuracy leader (no significant differences)"
    if top_acc == second_acc:
        tie_note += "; exact accuracy tie broken lexicographically"
    steps.append({"step": "decision", "reason": tie_note, "model": top})
    return ModelSelectionReport(recommended=top, ranking=ranking, steps=steps)


def step_select_model(config: RunConfig) -> ModelSelectionReport:
    paths = RunPaths(config.out)
    class_predictions = {}
    for model in config.models:
        path = paths.require(paths.reports / f"predictions_{model}.csv", "train")
        class_predictions[model] = {r["subject_id"]: r for r in read_predictions(path)}
    interp_path = paths.interp / "report.csv"
    records = read_interp_report(interp_path) if interp_path.exists() else []
    report = select_model(
        class_predictions, records,
        alpha=config.alpha, method=config.select_method, k_percent=config.select_k,
    )
    paths.selection.mkdir(parents=True, exist_ok=True)
    out_path = paths.selection / "report.json"
    out_path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    write_manifest(
        paths, "select-model", config, [out_path], {"recommended": report.recommended}
    )
    return report


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def export_pgm(data: np.ndarray, path) -> None:
    """Write a 2D field in [0, 1] (or a bool mask) as a binary portable graymap."""
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ConfigError(f"graymap export needs a 2D field, got {arr.ndim}D")
    if arr.dtype == bool:
        gray = np.where(arr, 255, 0).astype(np.uint8)
    else:
        gray = np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode())
        fh.write(gray.tobytes())


def _fmt_pm(mean: float, sd: float) -> str:
    return f"{100 * mean:.2f}+-{100 * sd:.2f}"


def step_export(config: RunConfig) -> dict:
    paths = RunPaths(config.out)
    outputs = []
    # classification table: svm + models x (accuracy, sensitivity, specificity)
    rows = []
    for model in ["svm"] + list(config.models):
        path = paths.reports / f"folds_{model}.jsonl"
        if not path.exists():
            continue
        folds = [json.loads(l) for l in path.read_text().splitlines() if l.strip()]
        row = {"model": model}
        for metric in ("accuracy", "sensitivity", "specificity"):
            vals = np.array([f[metric] for f in folds], dtype=float)
            vals = vals[np.isfinite(vals)]
            sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            row[metric] = _fmt_pm(float(vals.mean()), sd)
        rows.append(row)
    paths.exports.mkdir(parents=True, exist_ok=True)
    if rows:
        t2 = paths.exports / "classification_table.csv"
        with open(t2, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["model", "accuracy", "sensitivity", "specificity"])
            w.writeheader()
            w.writerows(rows)
        outputs.append(t2)
    # interpretation tables: one per threshold, model rows x method columns
    agg_path = paths.interp / "aggregate.csv"
    if agg_path.exists():
        with open(agg_path, newline="") as fh:
            agg = list(csv.DictReader(fh))
        for k in config.topk:
            cells = {
                (r["model"], r["method"]): _fmt_pm(float(r["dice_mean"]), float(r["dice_sd"]))
                for r in agg
                if float(r["k_percent"]) == k
            }
            if not cells:
                continue
            t3 = paths.exports / f"dice_table_top{k:g}.csv"
            with open(t3, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["model"] + list(config.methods))
                for model in config.models:
                    w.writerow(
                        [model] + [cells.get((model, m), "") for m in config.methods]
                    )
            outputs.append(t3)
    # graymaps for every 2D interp artifact
    heat_dir = paths.interp / "heatmaps"
    if heat_dir.exists():
        for sidecar in sorted(heat_dir.rglob("*.json")):
            vol = load_volume(sidecar.with_suffix(""))
            rel = sidecar.relative_to(heat_dir).with_suffix(".pgm")
            out_path = paths.exports / "heatmaps" / rel
            export_pgm(vol.data, out_path)
            outputs.append(out_path)
    if not outputs:
        raise MissingArtifactError(
            "nothing to export; run `spectpd train` / `spectpd evaluate` first"
        )
    write_manifest(paths, "export", config, outputs, {"n_files": len(outputs)})
    return {"n_files": len(outputs)}
