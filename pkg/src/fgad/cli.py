"""Command-line interface: synth, detect, adapt, annotate, pipeline, verify, eval, plot."""

from __future__ import annotations

import dataclasses
import functools
import json
import os
import sys
from pathlib import Path

import click

from .config import RunConfig, ThresholdConfig, config_digest, load_config
from .data import synth_generate, write_csv
from .errors import ConfigError, DataError, FgadError, NumericError
from .pipeline import run_adapt, run_annotate, run_detect, run_eval, run_pipeline
from .plots import plot_run
from .verify import run_verification, write_report

OUT_ROOT_ENV = "FGAD_OUT_ROOT"

EXIT_CODES = {ConfigError: 2, DataError: 3, NumericError: 4}


def _fail(err: FgadError) -> "click.exceptions.Exit":
    click.echo(f"error: {err}", err=True)
    for cls, code in EXIT_CODES.items():
        if isinstance(err, cls):
            return sys.exit(code)
    return sys.exit(1)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except FgadError as err:
            _fail(err)

    return wrapper


def _resolve_config(config_path: str, seed: int | None,
                    threshold_rule: str | None) -> RunConfig:
    cfg = load_config(config_path)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed, raw={**cfg.raw, "seed": seed})
    if threshold_rule is not None:
        if ":" in threshold_rule:
            kind, _, raw_value = threshold_rule.partition(":")
            try:
                value = float(raw_value)
            except ValueError as err:
                raise ConfigError(f"bad threshold value in '{threshold_rule}'") from err
        else:
            kind, value = threshold_rule, 0.0
        cfg = dataclasses.replace(cfg, threshold=ThresholdConfig(kind, value))
    return cfg


def _resolve_out(cfg: RunConfig, out: str | None) -> Path:
    if out:
        return Path(out)
    if cfg.out_dir:
        return Path(cfg.out_dir)
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    return root / f"run-{config_digest(cfg)}"


config_option = click.option("--config", "config_path", required=True,
                             type=click.Path(), help="TOML or JSON run config.")
seed_option = click.option("--seed", type=int, default=None,
                           help="Override the config seed.")
out_option = click.option("--out", type=click.Path(), default=None,
                          help="Output directory (default: config out_dir, then "
                               f"${OUT_ROOT_ENV}/run-<digest>).")
threshold_option = click.option("--threshold-rule", default=None,
                                help="Override flagging rule, e.g. 'count:50', "
                                     "'quantile:0.9', 'absolute:0.5', 'oracle_count'.")


@click.group()
def main():
    """Fine-grained anomaly detection pipeline for domain-shifted tabular data."""


@main.command()
@config_option
@seed_option
@out_option
@handle_errors
def synth(config_path, seed, out):
    """Generate synthetic CSV datasets plus a manifest from the config."""
    cfg = _resolve_config(config_path, seed, None)
    if cfg.data.synthetic is None:
        raise ConfigError("synth requires a [data.synthetic] section")
    out_dir = _resolve_out(cfg, out)
    bundle = synth_generate(cfg.data.synthetic)
    manifest = write_csv(bundle, out_dir)
    click.echo(f"wrote {1 + bundle.n_targets} datasets and {manifest}")


@main.command()
@config_option
@seed_option
@out_option
@threshold_option
@handle_errors
def detect(config_path, seed, out, threshold_rule):
    """Train the detector on the reference and score all target instances."""
    cfg = _resolve_config(config_path, seed, threshold_rule)
    out_dir = _resolve_out(cfg, out)
    summary = run_detect(cfg, out_dir)
    click.echo(f"flagged {summary['n_flagged']}/{summary['n_targets']} "
               f"target instances -> {out_dir / 'scores.csv'}")


@main.command()
@config_option
@seed_option
@out_option
@handle_errors
def adapt(config_path, seed, out):
    """Learn per-target style rows on anomaly-excluded data (requires detect)."""
    cfg = _resolve_config(config_path, seed, None)
    out_dir = _resolve_out(cfg, out)
    summary = run_adapt(cfg, out_dir)
    click.echo(f"trained adapter with {summary['n_style_rows']} style rows -> "
               f"{out_dir / 'checkpoints' / 'adapter.json'}")


@main.command()
@config_option
@seed_option
@out_option
@handle_errors
def annotate(config_path, seed, out):
    """Cluster detected anomalies into subtypes (requires detect and adapt)."""
    cfg = _resolve_config(config_path, seed, None)
    out_dir = _resolve_out(cfg, out)
    doc = run_annotate(cfg, out_dir)
    click.echo(f"annotated {doc['n_flagged']} anomalies into k={doc['k']} subtypes "
               f"-> {out_dir / 'clusters.csv'}")


@main.command()
@config_option
@seed_option
@out_option
@threshold_option
@handle_errors
def pipeline(config_path, seed, out, threshold_rule):
    """Run detect -> exclude -> adapt -> annotate -> evaluate end to end."""
    cfg = _resolve_config(config_path, seed, threshold_rule)
    out_dir = _resolve_out(cfg, out)
    result = run_pipeline(cfg, out_dir, echo=click.echo)
    click.echo(f"metrics: {json.dumps(result.metrics_doc, sort_keys=True)}")
    click.echo(f"artifacts in {out_dir}")


@main.command()
@click.option("--out", type=click.Path(), default=None,
              help="Where to write verification.json (default: report root).")
@click.option("--seed", type=int, default=0)
@click.option("--trend-trials", type=int, default=200,
              help="Monte-Carlo trials per grid point for the shift trend.")
@handle_errors
def verify(out, seed, trend_trials):
    """Run the oracle/property verification suite and emit a JSON report."""
    report = run_verification(seed=seed, trend_trials=trend_trials)
    out_path = Path(out or os.environ.get(OUT_ROOT_ENV, "runs")) / "verification.json"
    write_report(report, out_path)
    for name, check in report["checks"].items():
        click.echo(f"{'PASS' if check['passed'] else 'FAIL'}  {name}")
    click.echo(f"report: {out_path} (elapsed {report['elapsed_seconds']}s)")


@main.command(name="eval")
@config_option
@seed_option
@out_option
@handle_errors
def eval_cmd(config_path, seed, out):
    """Recompute metrics from a run directory's scores/clusters CSVs."""
    cfg = _resolve_config(config_path, seed, None)
    out_dir = _resolve_out(cfg, out)
    doc = run_eval(cfg, out_dir)
    click.echo(json.dumps(doc, sort_keys=True))


@main.command()
@click.argument("run_dir", type=click.Path(exists=True))
@handle_errors
def plot(run_dir):
    """Emit score histogram, subtype scatter, and eigengap plots for a run."""
    results = plot_run(run_dir)
    for name, outcome in results.items():
        click.echo(f"{name}: {outcome}")


if __name__ == "__main__":
    main()
