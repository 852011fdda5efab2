"""Command line entry point: ``screen run | batch | replay``."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from vesselscreen.config import ConfigError, MetricSpec, ScenarioConfig, load_scenario
from vesselscreen.screening import batch_runs, run_screening, steady_summary
from vesselscreen import traceio


def _load(config) -> ScenarioConfig:
    try:
        return load_scenario(config) if config else ScenarioConfig()
    except (OSError, ConfigError) as exc:
        raise click.ClickException(f"cannot load config: {exc}")


def _offsets(text: str):
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise click.BadParameter(f"not a comma-separated list of numbers: {text!r}")
    if not vals:
        raise click.BadParameter("at least one offset is required")
    return vals


def _print_summary(summary) -> None:
    for key, val in summary.items():
        click.echo(f"{key:>18s}  {traceio.fmt(val)}")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Simulated autonomous vessel screening."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--config", "config", type=click.Path(dir_okay=False), help="Scenario YAML file (defaults if omitted).")
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--out", "out", type=click.Path(file_okay=False), default="screen_out", show_default=True)
@click.option("--ply/--no-ply", default=False, help="Dump the final ring buffer as PLY point clouds.")
@click.option("--plots/--no-plots", default=True, show_default=True)
def run(config, seed, out, ply, plots) -> None:
    """Run one screening sweep and write trace, summary and metadata."""
    cfg = _load(config)
    if seed is not None:
        cfg = cfg.with_(seed=seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    trace = run_screening(cfg, dump_dir=out if ply else None)
    traceio.write_trace(trace, out / "trace.csv")
    traceio.write_summary(trace.summary, out / "summary.csv")
    traceio.write_metadata(trace, out / "metadata.json")
    if plots:
        from vesselscreen.plotting import plot_errors, plot_path

        plot_errors(trace.columns, out / "errors.png", trace.header)
        plot_path(trace.columns, out / "path.png")
    _print_summary(trace.summary)
    click.echo(f"wrote {out}")
    if trace.status != "ok":
        sys.exit(2)


@main.command()
@click.option("--config", "config", type=click.Path(dir_okay=False))
@click.option("--offsets", default="0,15,30,45", show_default=True, help="Comma-separated initial offsets in degrees.")
@click.option("--repeats", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--seed", type=int, default=None, help="Override the template seed.")
@click.option("--out", "out", type=click.Path(file_okay=False), default="screen_batch", show_default=True)
@click.option("--plots/--no-plots", default=True, show_default=True)
def batch(config, offsets, repeats, seed, out, plots) -> None:
    """Run offsets x repeats sweeps and write one table with run and aggregate rows."""
    cfg = _load(config)
    if seed is not None:
        cfg = cfg.with_(seed=seed)
    try:
        result = batch_runs(cfg, _offsets(offsets), repeats)
    except ConfigError as exc:
        raise click.ClickException(str(exc))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    traceio.write_batch(result.rows, out / "batch.csv")
    if plots:
        from vesselscreen.plotting import plot_batch

        plot_batch(result.runs(), out / "batch.png")
    for row in result.aggregates():
        click.echo(
            f"offset {row['offset_deg']:5.1f}  runs {row['n_runs']}  aborted {row['n_aborted']}  "
            f"e_or_rea {traceio.fmt(row['e_or_rea_mean'])}  e_ce {traceio.fmt(row['e_ce_mean'])}  "
            f"|e_ra| {traceio.fmt(row['e_ra_mean'])}"
        )
    click.echo(f"wrote {out / 'batch.csv'}")


@main.command()
@click.option("--trace", "trace_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--plots/--no-plots", default=True, show_default=True)
def replay(trace_path, plots) -> None:
    """Recompute the summary of a stored trace and redraw its figures."""
    try:
        header, cols = traceio.read_trace(trace_path)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    defaults = MetricSpec()
    ms = MetricSpec(
        or_threshold_deg=float(header.get("or_threshold_deg", defaults.or_threshold_deg)),
        ce_threshold_mm=float(header.get("ce_threshold_mm", defaults.ce_threshold_mm)),
        ra_threshold_mm=float(header.get("ra_threshold_mm", defaults.ra_threshold_mm)),
        hold_s=float(header.get("hold_s", defaults.hold_s)),
    )
    summary = steady_summary(cols, ms, header.get("status", "ok"))
    _print_summary(summary)
    if plots:
        from vesselscreen.plotting import plot_errors, plot_path

        base = Path(trace_path)
        stem = base.stem
        plot_errors(cols, base.with_name(f"{stem}_errors.png"), header)
        plot_path(cols, base.with_name(f"{stem}_path.png"))


if __name__ == "__main__":  # pragma: no cover
    main()
