"""Figure rendering for harness reports.

Figures are written next to the delimited output; they are a visualization
convenience and carry no data not already in the CSV/JSON reports.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def render_compare_figure(report, path: str | Path) -> Path:
    """Bar chart of gather-vs-reduce buffer bytes and accumulation time."""
    rows = [r for r in report.per_variable]
    total = report.total
    fig, (ax_b, ax_t) = plt.subplots(1, 2, figsize=(9, 4))
    labels = [r.variable for r in rows] + ["total"]
    x = range(len(labels))
    gather_mb = [r.gather_bytes / 1e6 for r in rows] + [total.gather_bytes / 1e6]
    reduce_mb = [r.reduce_bytes / 1e6 for r in rows] + [total.reduce_bytes / 1e6]
    width = 0.38
    ax_b.bar([i - width / 2 for i in x], gather_mb, width, label="gather")
    ax_b.bar([i + width / 2 for i in x], reduce_mb, width, label="reduce")
    ax_b.set_xticks(list(x), labels, rotation=20, ha="right")
    ax_b.set_ylabel("buffer size (MB)")
    ax_b.set_yscale("log")
    ax_b.set_title(f"accumulate size, world={report.world_size}")
    ax_b.legend()

    gather_ms = [r.gather_duration_us / 1e3 for r in rows] + [total.gather_duration_us / 1e3]
    reduce_ms = [r.reduce_duration_us / 1e3 for r in rows] + [total.reduce_duration_us / 1e3]
    ax_t.bar([i - width / 2 for i in x], gather_ms, width, label="gather")
    ax_t.bar([i + width / 2 for i in x], reduce_ms, width, label="reduce")
    ax_t.set_xticks(list(x), labels, rotation=20, ha="right")
    ax_t.set_ylabel("virtual accumulate time (ms)")
    ax_t.set_title("accumulate time")
    ax_t.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_scaling_figure(report, path: str | Path) -> Path:
    """Throughput and efficiency curves over world size, one line per strategy."""
    fig, (ax_tp, ax_eff) = plt.subplots(1, 2, figsize=(9, 4))
    by_strategy: dict[str, list] = {}
    for row in report.rows:
        by_strategy.setdefault(row.strategy, []).append(row)
    for strategy, rows in by_strategy.items():
        worlds = [r.world for r in rows]
        ax_tp.plot(worlds, [r.throughput for r in rows], marker="o",
                   label=strategy)
        ax_eff.plot(worlds, [r.efficiency for r in rows], marker="o",
                    label=strategy)
    ideal = [1.0] * len(report.config.world_sizes)
    ax_eff.plot(list(report.config.world_sizes), ideal, ls="--", c="gray",
                label="ideal")
    for ax, ylabel in ((ax_tp, "throughput (tokens/virtual s)"),
                       (ax_eff, "efficiency")):
        ax.set_xlabel("world size")
        ax.set_ylabel(ylabel)
        ax.set_xscale("log", base=2)
        ax.legend()
    ax_tp.set_title(f"{report.mode} scaling throughput")
    ax_eff.set_title(f"{report.mode} scaling efficiency")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
