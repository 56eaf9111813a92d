"""Experiment orchestration: compare runs, scaling sweeps, report emission.

Reports are deterministic functions of the configuration: all metrics come
from the virtual clock and seeded workloads, so re-running a config yields
byte-identical JSON, CSV, and trace files.  Wall-clock time is logged to
stderr only and never written into report files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from . import __version__
from .collectives import (
    CollectiveStats,
    FusionConfig,
    RankCtx,
    Strategy,
    World,
    exchange_bundle,
)
from .costmodel import (
    CostModel,
    MemoryReport,
    build_memory_report,
    emit_trace,
)
from .grads import materialize
from .workload import WorkloadSpec, gen_bundle

CSV_HEADER = ("world,strategy,tokens_total,virtual_seconds,throughput,"
              "speedup,efficiency,gather_bytes,reduce_bytes")

DEFAULT_BATCH_FLOOR = 1024  # per-worker tokens below this degrade convergence
DEFAULT_COMPUTE_US_PER_TOKEN = 1.0


class ConfigError(ValueError):
    """Invalid experiment configuration; message carries field/line context."""


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Parse a flat ``key = value`` config file with ``#`` comments."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def _parse_int(field_name: str, value) -> int:
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"field {field_name!r}: expected integer, got {value!r}")


def _parse_float(field_name: str, value) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"field {field_name!r}: expected number, got {value!r}")


def _parse_int_list(field_name: str, value) -> tuple[int, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(_parse_int(field_name, v) for v in value)
    return tuple(_parse_int(field_name, v.strip())
                 for v in str(value).split(",") if v.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment parameters for one harness invocation."""

    mode: str  # compare | weak | strong
    strategy: str = "both"  # legacy | dense | proposed | both
    world_sizes: tuple[int, ...] = (64,)
    vocab: int = 2048
    hidden: int = 64
    tokens_per_rank: int | None = 128
    global_tokens: int | None = None
    extra_dense_vars: tuple[tuple[int, ...], ...] = ()
    tied: bool = True
    steps: int = 1
    seed: int = 42
    fusion_threshold: int | None = None  # None -> env / built-in default
    latency_us: float = 10.0
    bandwidth_bytes_per_s: float = 12.5e9
    compute_us_per_token: float = DEFAULT_COMPUTE_US_PER_TOKEN
    batch_floor: int = DEFAULT_BATCH_FLOOR
    remainder_policy: str = "error"  # error | pad | drop
    exec_mode: str = "threads"
    trace_out: str | None = None
    report_out: str | None = None
    csv_out: str | None = None
    plot: bool = True

    def __post_init__(self):
        if self.mode not in ("compare", "weak", "strong"):
            raise ConfigError(f"field 'mode': unknown mode {self.mode!r}")
        if self.strategy not in ("legacy", "dense", "proposed", "both"):
            raise ConfigError(f"field 'strategy': unknown strategy {self.strategy!r}")
        if not self.world_sizes:
            raise ConfigError("field 'world_sizes': must be non-empty")
        if any(w < 1 for w in self.world_sizes):
            raise ConfigError("field 'world_sizes': every world size must be >= 1")
        if list(self.world_sizes) != sorted(self.world_sizes):
            raise ConfigError("field 'world_sizes': must be ascending")
        if self.remainder_policy not in ("error", "pad", "drop"):
            raise ConfigError(
                f"field 'remainder_policy': unknown policy {self.remainder_policy!r}")
        if self.exec_mode not in ("threads", "serial"):
            raise ConfigError(f"field 'exec_mode': unknown mode {self.exec_mode!r}")
        if self.mode == "strong":
            if self.global_tokens is None:
                raise ConfigError("field 'global_tokens': required in strong mode")
            if self.remainder_policy == "error":
                for w in self.world_sizes:
                    if self.global_tokens % w:
                        raise ConfigError(
                            f"field 'global_tokens': {self.global_tokens} not "
                            f"divisible by world size {w}; set remainder_policy "
                            "to 'pad' or 'drop'")
        elif self.tokens_per_rank is None:
            raise ConfigError("field 'tokens_per_rank': required in this mode")
        if self.steps < 1:
            raise ConfigError("field 'steps': must be >= 1")

    @classmethod
    def build(cls, mode: str, file_values: Mapping[str, str] | None = None,
              **overrides) -> "ExperimentConfig":
        """Merge config-file values with CLI overrides (overrides win)."""
        merged: dict = {"mode": mode}
        parsers = {
            "strategy": str, "remainder_policy": str, "exec_mode": str,
            "trace_out": str, "report_out": str, "csv_out": str,
            "world_sizes": lambda v: _parse_int_list("world_sizes", v),
            "extra_dense_vars": _parse_extra_shapes,
            "vocab": lambda v: _parse_int("vocab", v),
            "hidden": lambda v: _parse_int("hidden", v),
            "tokens_per_rank": lambda v: _parse_int("tokens_per_rank", v),
            "global_tokens": lambda v: _parse_int("global_tokens", v),
            "steps": lambda v: _parse_int("steps", v),
            "seed": lambda v: _parse_int("seed", v),
            "fusion_threshold": lambda v: _parse_int("fusion_threshold", v),
            "batch_floor": lambda v: _parse_int("batch_floor", v),
            "latency_us": lambda v: _parse_float("latency_us", v),
            "bandwidth_bytes_per_s": lambda v: _parse_float("bandwidth_bytes_per_s", v),
            "compute_us_per_token": lambda v: _parse_float("compute_us_per_token", v),
            "plot": _parse_bool,
            "tied": _parse_bool,
        }
        for source in (file_values or {}), overrides:
            for key, value in source.items():
                if value is None:
                    continue
                if key not in parsers:
                    raise ConfigError(f"unknown config field {key!r}")
                merged[key] = parsers[key](value)
        if mode == "strong":
            merged.setdefault("global_tokens", 8192)
            merged.setdefault("world_sizes", (1, 2, 4, 8, 16))
            merged.setdefault("tokens_per_rank", None)
        elif mode == "weak":
            merged.setdefault("world_sizes", (2, 4, 8, 16))
            merged.setdefault("tokens_per_rank", 1000)
            merged.setdefault("steps", 4)
        return cls(**merged)

    def cost_model(self) -> CostModel:
        return CostModel(self.latency_us, self.bandwidth_bytes_per_s)

    def fusion(self) -> FusionConfig:
        if self.fusion_threshold is None:
            return FusionConfig.from_env()
        return FusionConfig(self.fusion_threshold)

    def to_json_obj(self) -> dict:
        return {
            "mode": self.mode,
            "strategy": self.strategy,
            "world_sizes": list(self.world_sizes),
            "vocab": self.vocab,
            "hidden": self.hidden,
            "tokens_per_rank": self.tokens_per_rank,
            "global_tokens": self.global_tokens,
            "extra_dense_vars": [list(s) for s in self.extra_dense_vars],
            "tied": self.tied,
            "steps": self.steps,
            "seed": self.seed,
            "fusion_threshold": self.fusion().threshold_bytes,
            "latency_us": self.latency_us,
            "bandwidth_bytes_per_s": self.bandwidth_bytes_per_s,
            "compute_us_per_token": self.compute_us_per_token,
            "batch_floor": self.batch_floor,
            "remainder_policy": self.remainder_policy,
            # exec_mode is deliberately omitted: serialized and concurrent
            # execution produce identical results, and reports must match.
        }


def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected boolean, got {value!r}")


def _parse_extra_shapes(value) -> tuple[tuple[int, ...], ...]:
    # "V1xH1;V2xH2" in config files, or an already-structured sequence.
    if isinstance(value, (list, tuple)):
        return tuple(tuple(int(s) for s in shape) for shape in value)
    shapes = []
    for part in str(value).split(";"):
        part = part.strip()
        if not part:
            continue
        shapes.append(tuple(_parse_int("extra_dense_vars", d)
                            for d in part.split("x")))
    return tuple(shapes)


# -- simulation ------------------------------------------------------------


@dataclass
class RunResult:
    """One simulated world run under one strategy."""

    strategy: Strategy
    world_size: int
    tokens_total: int
    virtual_us: float
    stats: CollectiveStats
    final_bundles: list

    @property
    def virtual_seconds(self) -> float:
        return self.virtual_us / 1e6

    @property
    def throughput(self) -> float:
        return self.tokens_total / self.virtual_seconds if self.virtual_us else 0.0


def simulate_run(cfg: ExperimentConfig, strategy: Strategy, world_size: int,
                 tokens_per_rank: int) -> RunResult:
    """Run ``cfg.steps`` synchronous exchange steps of the synthetic workload."""
    spec = WorkloadSpec(cfg.vocab, cfg.hidden, tokens_per_rank,
                        cfg.extra_dense_vars, cfg.seed, tied=cfg.tied)
    world = World(world_size, cost_model=cfg.cost_model(), mode=cfg.exec_mode,
                  pid=world_size)
    fusion = cfg.fusion()

    def rank_fn(ctx: RankCtx):
        last = None
        for step in range(cfg.steps):
            ctx.advance(tokens_per_rank * cfg.compute_us_per_token)
            bundle = gen_bundle(spec, ctx.rank, step)
            last = exchange_bundle(ctx, bundle, strategy, fusion)
        return last

    finals = world.run(rank_fn)
    return RunResult(
        strategy=strategy, world_size=world_size,
        tokens_total=world_size * tokens_per_rank * cfg.steps,
        virtual_us=max(world.clocks), stats=world.stats, final_bundles=finals)


# -- efficiency arithmetic -------------------------------------------------


@dataclass(frozen=True)
class EfficiencyRow:
    world: int
    throughput: float
    speedup: float
    efficiency: float


def compute_efficiency(throughputs: Mapping[int, float], base: int
                       ) -> list[EfficiencyRow]:
    """Scaled speedup and efficiency relative to the base world size.

    speedup(n) = T(n)/T(base); efficiency = speedup / (n/base).  Invariant
    under uniform scaling of throughputs; speedup at base is exactly 1.
    """
    if base not in throughputs:
        raise ConfigError(f"base world size {base} missing from throughputs")
    t_base = throughputs[base]
    rows = []
    for world in sorted(throughputs):
        speedup = throughputs[world] / t_base
        efficiency = speedup / (world / base)
        rows.append(EfficiencyRow(world, throughputs[world], speedup, efficiency))
    return rows


# -- scaling reports -------------------------------------------------------


@dataclass(frozen=True)
class ScalingRow:
    world: int
    strategy: str
    tokens_total: int
    virtual_seconds: float
    throughput: float
    speedup: float
    efficiency: float
    time_to_solution_s: float
    gather_bytes: int
    reduce_bytes: int
    below_batch_floor: bool

    def to_json_obj(self) -> dict:
        return {
            "world": self.world,
            "strategy": self.strategy,
            "tokens_total": self.tokens_total,
            "virtual_seconds": self.virtual_seconds,
            "throughput": self.throughput,
            "speedup": self.speedup,
            "efficiency": self.efficiency,
            "time_to_solution_s": self.time_to_solution_s,
            "gather_bytes": self.gather_bytes,
            "reduce_bytes": self.reduce_bytes,
            "below_batch_floor": self.below_batch_floor,
        }

    def csv_fields(self) -> list[str]:
        return [
            str(self.world), self.strategy, str(self.tokens_total),
            repr(self.virtual_seconds), repr(self.throughput),
            repr(self.speedup), repr(self.efficiency),
            str(self.gather_bytes), str(self.reduce_bytes),
        ]


@dataclass(frozen=True)
class ScalingReport:
    mode: str
    base_world: int
    rows: tuple[ScalingRow, ...]
    config: ExperimentConfig

    def to_json_obj(self) -> dict:
        return {
            "mode": self.mode,
            "base_world": self.base_world,
            "rows": [r.to_json_obj() for r in self.rows],
            "config": self.config.to_json_obj(),
            "software_version": __version__,
        }


def _strategies(cfg: ExperimentConfig) -> list[Strategy]:
    if cfg.strategy == "both":
        return [Strategy.LEGACY_GATHER, Strategy.SPARSE_AS_DENSE]
    return [Strategy(cfg.strategy)]


def _per_rank_tokens_strong(cfg: ExperimentConfig, world: int) -> int:
    q, r = divmod(cfg.global_tokens, world)
    if r == 0:
        return q
    if cfg.remainder_policy == "pad":
        return q + 1
    if cfg.remainder_policy == "drop":
        return q
    raise ConfigError(
        f"global_tokens {cfg.global_tokens} not divisible by world {world}")


def run_weak_scaling(cfg: ExperimentConfig) -> ScalingReport:
    """Fixed per-rank tokens; total work grows with the world size."""
    if cfg.mode != "weak":
        raise ConfigError(f"expected mode 'weak', got {cfg.mode!r}")
    return _run_scaling(cfg, lambda world: cfg.tokens_per_rank)


def run_strong_scaling(cfg: ExperimentConfig) -> ScalingReport:
    """Fixed global tokens split across ranks; flags sub-floor per-rank batches."""
    if cfg.mode != "strong":
        raise ConfigError(f"expected mode 'strong', got {cfg.mode!r}")
    return _run_scaling(cfg, lambda world: _per_rank_tokens_strong(cfg, world))


def _run_scaling(cfg: ExperimentConfig, tokens_for_world) -> ScalingReport:
    base = cfg.world_sizes[0]
    rows: list[ScalingRow] = []
    for strategy in _strategies(cfg):
        results = {}
        for world in cfg.world_sizes:
            results[world] = simulate_run(cfg, strategy, world,
                                          tokens_for_world(world))
            if cfg.trace_out:
                path = _world_path(cfg.trace_out, strategy.value, world)
                with open(path, "w") as f:
                    emit_trace(results[world].stats.events, f)
        eff = compute_efficiency(
            {w: r.throughput for w, r in results.items()}, base)
        eff_by_world = {e.world: e for e in eff}
        for world in cfg.world_sizes:
            res = results[world]
            e = eff_by_world[world]
            rows.append(ScalingRow(
                world=world, strategy=strategy.value,
                tokens_total=res.tokens_total,
                virtual_seconds=res.virtual_seconds,
                throughput=res.throughput, speedup=e.speedup,
                efficiency=e.efficiency,
                time_to_solution_s=res.virtual_seconds,
                gather_bytes=res.stats.total_gather_recv_bytes,
                reduce_bytes=res.stats.total_reduce_payload_bytes,
                below_batch_floor=tokens_for_world(world) < cfg.batch_floor,
            ))
    report = ScalingReport(mode=cfg.mode, base_world=base, rows=tuple(rows),
                           config=cfg)
    _write_scaling_outputs(cfg, report)
    return report


# -- compare mode ----------------------------------------------------------


@dataclass(frozen=True)
class CompareOutcome:
    memory_report: MemoryReport
    runs: dict  # Strategy -> RunResult
    rows: tuple[ScalingRow, ...]

    def to_json_obj(self, cfg: ExperimentConfig) -> dict:
        return {
            "mode": "compare",
            "memory_report": self.memory_report.to_json_obj(),
            "rows": [r.to_json_obj() for r in self.rows],
            "config": cfg.to_json_obj(),
            "software_version": __version__,
        }


def run_compare(cfg: ExperimentConfig) -> CompareOutcome:
    """Identical seeded workload under legacy gather and sparse-as-dense reduce.

    Emits a memory report comparing buffer bytes and virtual accumulation
    time, plus one trace file per strategy.
    """
    if cfg.mode != "compare":
        raise ConfigError(f"expected mode 'compare', got {cfg.mode!r}")
    world = cfg.world_sizes[0]
    legacy = simulate_run(cfg, Strategy.LEGACY_GATHER, world, cfg.tokens_per_rank)
    dense = simulate_run(cfg, Strategy.SPARSE_AS_DENSE, world, cfg.tokens_per_rank)
    report = build_memory_report(legacy.stats, dense.stats)
    rows = tuple(
        ScalingRow(
            world=world, strategy=res.strategy.value,
            tokens_total=res.tokens_total,
            virtual_seconds=res.virtual_seconds,
            throughput=res.throughput, speedup=1.0, efficiency=1.0,
            time_to_solution_s=res.virtual_seconds,
            gather_bytes=res.stats.total_gather_recv_bytes,
            reduce_bytes=res.stats.total_reduce_payload_bytes,
            below_batch_floor=cfg.tokens_per_rank < cfg.batch_floor,
        )
        for res in (legacy, dense))
    outcome = CompareOutcome(
        memory_report=report,
        runs={Strategy.LEGACY_GATHER: legacy, Strategy.SPARSE_AS_DENSE: dense},
        rows=rows)
    _write_compare_outputs(cfg, outcome)
    return outcome


def check_compare_equivalence(outcome: CompareOutcome, tol: float = 1e-10) -> None:
    """Assert both strategies produced the same materialized gradients."""
    import numpy as np
    legacy = outcome.runs[Strategy.LEGACY_GATHER]
    dense = outcome.runs[Strategy.SPARSE_AS_DENSE]
    for lb, db in zip(legacy.final_bundles, dense.final_bundles):
        for var in lb.var_ids:
            a = materialize(lb.contributions(var)[0]).array
            b = materialize(db.contributions(var)[0]).array
            scale = max(np.abs(b).max(), 1.0)
            if np.abs(a - b).max() > tol * scale:
                raise AssertionError(f"strategy results diverge on {var!r}")


# -- output writers --------------------------------------------------------


def _json_dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _strategy_path(path: str, strategy: str) -> Path:
    p = Path(path)
    return p.with_name(f"{p.stem}.{strategy}{p.suffix or '.json'}")


def _world_path(path: str, strategy: str, world: int) -> Path:
    p = Path(path)
    return p.with_name(f"{p.stem}.{strategy}.w{world}{p.suffix or '.json'}")


def write_csv(rows: Sequence[ScalingRow], path: str | Path) -> None:
    lines = [CSV_HEADER]
    lines += [",".join(r.csv_fields()) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _write_compare_outputs(cfg: ExperimentConfig, outcome: CompareOutcome) -> None:
    if cfg.report_out:
        Path(cfg.report_out).write_text(_json_dumps(outcome.to_json_obj(cfg)))
    if cfg.csv_out:
        write_csv(outcome.rows, cfg.csv_out)
        if cfg.plot:
            from .plots import render_compare_figure
            render_compare_figure(outcome.memory_report,
                                  Path(cfg.csv_out).with_suffix(".png"))
    if cfg.trace_out:
        for strategy, res in outcome.runs.items():
            with open(_strategy_path(cfg.trace_out, strategy.value), "w") as f:
                emit_trace(res.stats.events, f)


def _write_scaling_outputs(cfg: ExperimentConfig, report: ScalingReport) -> None:
    if cfg.report_out:
        Path(cfg.report_out).write_text(_json_dumps(report.to_json_obj()))
    if cfg.csv_out:
        write_csv(report.rows, cfg.csv_out)
        if cfg.plot:
            from .plots import render_scaling_figure
            render_scaling_figure(report, Path(cfg.csv_out).with_suffix(".png"))


def run_experiment(cfg: ExperimentConfig):
    if cfg.mode == "compare":
        return run_compare(cfg)
    if cfg.mode == "weak":
        return run_weak_scaling(cfg)
    return run_strong_scaling(cfg)
