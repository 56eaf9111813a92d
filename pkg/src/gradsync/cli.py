"""Command-line interface for the gradient-exchange harness.

Exit codes: 0 success, 2 configuration error, 3 collective abort.
"""

from __future__ import annotations

import sys
import time

import click

from .collectives import CollectiveAbort
from .harness import (
    ConfigError,
    ExperimentConfig,
    parse_config_file,
    run_experiment,
)


def _common_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True),
                     default=None, help="Flat key = value config file."),
        click.option("--ranks", type=int, default=None,
                     help="Single simulated world size."),
        click.option("--ranks-list", default=None,
                     help="Comma-separated ascending world sizes."),
        click.option("--strategy",
                     type=click.Choice(["legacy", "dense", "proposed", "both"]),
                     default=None),
        click.option("--vocab", type=int, default=None),
        click.option("--hidden", type=int, default=None),
        click.option("--tokens-per-rank", type=int, default=None),
        click.option("--global-tokens", type=int, default=None),
        click.option("--steps", type=int, default=None),
        click.option("--fusion-threshold", type=int, default=None,
                     help="Fusion buffer byte threshold; 0 disables fusion. "
                          "Overrides GRADSYNC_FUSION_THRESHOLD."),
        click.option("--seed", type=int, default=None),
        click.option("--trace-out", default=None,
                     help="Chrome trace-event JSON output path (stem)."),
        click.option("--report-out", default=None,
                     help="JSON report output path."),
        click.option("--csv", "csv_flag", is_flag=True, default=False,
                     help="Also write the CSV report next to --report-out."),
        click.option("--csv-out", default=None, help="Explicit CSV path."),
        click.option("--exec-mode", type=click.Choice(["threads", "serial"]),
                     default=None, help="Concurrent ranks or the serialized "
                                        "determinism-oracle mode."),
        click.option("--latency-us", type=float, default=None,
                     help="Cost-model latency term (virtual us)."),
        click.option("--bandwidth", "bandwidth_bytes_per_s", type=float,
                     default=None, help="Cost-model bandwidth (bytes/s)."),
        click.option("--compute-us-per-token", type=float, default=None),
        click.option("--batch-floor", type=int, default=None,
                     help="Per-rank token floor below which strong-scaling "
                          "rows are flagged."),
        click.option("--remainder-policy",
                     type=click.Choice(["error", "pad", "drop"]), default=None),
        click.option("--extra-dense-vars", default=None,
                     help="Extra dense variable shapes, e.g. '256x64;128x128'."),
        click.option("--plot/--no-plot", "plot", default=None,
                     help="Render matplotlib figures next to the CSV report."),
        click.option("--tied/--no-tied", "tied", default=None,
                     help="Include the tied embedding/projection variable "
                          "(default) or run an all-dense workload."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _build_config(mode: str, config_path, ranks, ranks_list, csv_flag,
                  csv_out, **overrides) -> ExperimentConfig:
    file_values = parse_config_file(config_path) if config_path else {}
    if ranks is not None and ranks_list is not None:
        raise ConfigError("pass either --ranks or --ranks-list, not both")
    if ranks is not None:
        overrides["world_sizes"] = (ranks,)
    elif ranks_list is not None:
        overrides["world_sizes"] = ranks_list
    if csv_out is not None:
        overrides["csv_out"] = csv_out
    elif csv_flag:
        report_out = overrides.get("report_out") or file_values.get("report_out")
        if not report_out:
            raise ConfigError("--csv needs --report-out (or --csv-out PATH)")
        from pathlib import Path
        overrides["csv_out"] = str(Path(report_out).with_suffix(".csv"))
    return ExperimentConfig.build(mode, file_values, **overrides)


def _run(mode: str, kwargs) -> None:
    started = time.monotonic()
    try:
        cfg = _build_config(mode, **kwargs)
        run_experiment(cfg)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        raise SystemExit(2)
    except CollectiveAbort as e:
        click.echo(f"collective abort: {e}", err=True)
        raise SystemExit(3)
    # Wall clock goes to stderr only; report files stay deterministic.
    click.echo(f"wall-clock: {time.monotonic() - started:.3f}s", err=True)


@click.group()
@click.version_option()
def main():
    """Simulated sparse-gather vs dense-reduce gradient exchange."""


@main.command()
@_common_options
def compare(**kwargs):
    """Byte/time comparison of legacy gather vs sparse-as-dense reduce."""
    _run("compare", kwargs)


@main.command()
@_common_options
def weak(**kwargs):
    """Weak-scaling sweep: fixed per-rank tokens across world sizes."""
    _run("weak", kwargs)


@main.command()
@_common_options
def strong(**kwargs):
    """Strong-scaling sweep: fixed global tokens split across ranks."""
    _run("strong", kwargs)


if __name__ == "__main__":
    main()
