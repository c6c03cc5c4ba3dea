"""Command-line surface wiring the pipeline steps together.

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite artifact,
4 numerical failure.
"""

from __future__ import annotations

import functools
import json
import sys

import click

from . import pipeline
from .errors import ConfigError, LockError, MissingArtifactError, NumericalError, ShapeError

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4


def _parse_list(_ctx, _param, value):
    if value is None:
        return None
    return tuple(v.strip() for v in value.split(",") if v.strip())


def _parse_float_list(_ctx, _param, value):
    if value is None:
        return None
    try:
        return tuple(float(v) for v in value.split(",") if v.strip())
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from exc


def common_options(fn):
    @click.option("--config", "config_path", type=click.Path(), default=None,
                  help="JSON config file; flags override file values.")
    @click.option("--seed", type=int, default=None, help="Master seed.")
    @click.option("--out", type=click.Path(), default=None, help="Run directory.")
    @click.option("--grid", type=click.Choice(["full", "half"]), default=None,
                  help="Volume grid: 91x109x91 (full) or 46x55x46 (half).")
    @click.option("--models", callback=_parse_list, default=None,
                  help="Comma-separated model tags.")
    @click.option("--methods", callback=_parse_list, default=None,
                  help="Comma-separated attribution methods.")
    @click.option("--topk", callback=_parse_float_list, default=None,
                  help='Top-k percentages for binarization (default "10,1").')
    @click.option("--alpha", type=float, default=None, help="Significance level.")
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        return fn(*args, **kwargs)

    return wrapper


def build_config(config_path, **overrides) -> pipeline.RunConfig:
    try:
        return pipeline.load_config(config_path, overrides)
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


def _execute(step, config, **kwargs):
    try:
        with pipeline.run_lock(config.out):
            result = step(config, **kwargs)
    except (ConfigError, ShapeError, LockError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except MissingArtifactError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_MISSING)
    except NumericalError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)
    return result


@click.group()
def cli():
    """Interpretable SPECT PD recognition on synthetic phantom data."""


@cli.command("generate-data")
@common_options
@click.option("--cohort", type=int, default=None, help="Number of subjects.")
@click.option("--noise-level", type=float, default=None)
def cmd_generate_data(config_path, **kw):
    """Generate the phantom cohort and its manifest."""
    cfg = build_config(config_path, **kw)
    extra = _execute(pipeline.step_generate, cfg)
    click.echo(json.dumps(extra, sort_keys=True))


@cli.command("train")
@common_options
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr-start", type=float, default=None)
@click.option("--lr-end", type=float, default=None)
@click.option("--folds", type=int, default=None)
@click.option("--workers", type=int, default=None, help="Parallel fold workers (0 = auto).")
def cmd_train(config_path, **kw):
    """Train the selected architectures with 10-fold cross-validation."""
    cfg = build_config(config_path, **kw)
    summary = _execute(pipeline.step_train, cfg)
    click.echo(json.dumps(summary, sort_keys=True))


@cli.command("baseline")
@common_options
@click.option("--svm-c", type=float, default=None, help="SVM regularization constant.")
def cmd_baseline(config_path, **kw):
    """Extract SBR features and train the linear-SVM benchmark."""
    cfg = build_config(config_path, **kw)
    extra = _execute(pipeline.step_baseline, cfg)
    click.echo(json.dumps(extra, sort_keys=True))


@cli.command("attribute")
@common_options
@click.option("--subjects", callback=_parse_list, default=None,
              help="Restrict to these subject ids (default: all).")
@click.option("--shap-samples", type=int, default=None)
@click.option("--shap-block", type=int, default=None)
def cmd_attribute(config_path, subjects=None, **kw):
    """Compute attention maps for every model x method x test subject."""
    cfg = build_config(config_path, **kw)
    extra = _execute(pipeline.step_attribute, cfg, subjects=list(subjects) if subjects else None)
    click.echo(json.dumps(extra, sort_keys=True))


@cli.command("evaluate")
@common_options
def cmd_evaluate(config_path, **kw):
    """Score attention maps against segmented ground truth (Dice, MAE, heatmaps)."""
    cfg = build_config(config_path, **kw)
    extra = _execute(pipeline.step_evaluate, cfg)
    click.echo(json.dumps(extra, sort_keys=True))


@cli.command("stats")
@common_options
def cmd_stats(config_path, **kw):
    """ROC/AUC, McNemar model pairs, Wilcoxon method comparisons."""
    cfg = build_config(config_path, **kw)
    report = _execute(pipeline.step_stats, cfg)
    click.echo(json.dumps({"roc": report["roc"]}, sort_keys=True))


@cli.command("select-model")
@common_options
@click.option("--select-method", default=None, help="Attribution method used as feedback.")
@click.option("--select-k", type=float, default=None, help="Top-k%% Dice used as feedback.")
def cmd_select_model(config_path, **kw):
    """Recommend a model using interpreted feedback to break accuracy ties."""
    cfg = build_config(config_path, **kw)
    report = _execute(pipeline.step_select_model, cfg)
    click.echo(json.dumps(report.to_dict(), sort_keys=True, indent=1))


@cli.command("export")
@common_options
def cmd_export(config_path, **kw):
    """Export graymap images and CSV tables from run artifacts."""
    cfg = build_config(config_path, **kw)
    extra = _execute(pipeline.step_export, cfg)
    click.echo(json.dumps(extra, sort_keys=True))


def main():
    try:
        cli(standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(EXIT_CONFIG)
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


if __name__ == "__main__":
    main()
