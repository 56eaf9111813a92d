"""Buffer-size prediction, the linear virtual-time model, and trace emission.

All durations in reports are virtual-clock values computed from
``duration = latency + bytes / bandwidth``; wall clock is never used, so
reports are machine-independent and deterministic.  Timelines are written
as Chrome trace-event JSON, loadable by chrome://tracing and Perfetto.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable, Mapping, Sequence

from .grads import INDEX_WIDTH

DEFAULT_LATENCY_US = 10.0
DEFAULT_BANDWIDTH_BYTES_PER_S = 12.5e9  # 100 Gbps nominal fabric rate


@dataclass(frozen=True)
class CostModel:
    """Linear collective cost: alpha latency plus bytes over beta bandwidth."""

    latency_us: float = DEFAULT_LATENCY_US
    bandwidth_bytes_per_s: float = DEFAULT_BANDWIDTH_BYTES_PER_S

    def duration_us(self, nbytes: float) -> float:
        return self.latency_us + nbytes / self.bandwidth_bytes_per_s * 1e6


class Phase(str, Enum):
    BEGIN = "B"
    END = "E"
    COMPLETE = "X"


@dataclass(frozen=True)
class TraceEvent:
    """One timeline event in Chrome trace-event terms.

    ``pid`` identifies the simulated world run, ``tid`` the rank.
    """

    name: str
    phase: Phase
    timestamp_us: float
    pid: int
    tid: int
    duration_us: float | None = None
    args: Mapping[str, str] = field(default_factory=dict)

    def to_json_obj(self) -> dict:
        obj = {
            "name": self.name,
            "ph": self.phase.value,
            "ts": self.timestamp_us,
            "pid": self.pid,
            "tid": self.tid,
            "args": dict(self.args),
        }
        if self.phase is Phase.COMPLETE:
            obj["dur"] = 0.0 if self.duration_us is None else self.duration_us
        return obj

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "TraceEvent":
        phase = Phase(obj["ph"])
        return cls(
            name=obj["name"],
            phase=phase,
            timestamp_us=float(obj["ts"]),
            pid=int(obj["pid"]),
            tid=int(obj["tid"]),
            duration_us=float(obj["dur"]) if phase is Phase.COMPLETE else None,
            args={k: str(v) for k, v in obj.get("args", {}).items()},
        )


def validate_events(events: Sequence[TraceEvent]) -> None:
    """Check per-tid timestamp monotonicity and Begin/End balancing."""
    last_ts: dict[int, float] = {}
    open_spans: dict[tuple[str, int], int] = {}
    for ev in events:
        if ev.timestamp_us < last_ts.get(ev.tid, float("-inf")):
            raise ValueError(
                f"timestamps not non-decreasing for tid {ev.tid} at {ev.name!r}")
        last_ts[ev.tid] = ev.timestamp_us
        key = (ev.name, ev.tid)
        if ev.phase is Phase.BEGIN:
            open_spans[key] = open_spans.get(key, 0) + 1
        elif ev.phase is Phase.END:
            if open_spans.get(key, 0) < 1:
                raise ValueError(f"unbalanced End for {key}")
            open_spans[key] -= 1
    dangling = {k: v for k, v in open_spans.items() if v}
    if dangling:
        raise ValueError(f"unbalanced Begin events: {dangling}")


def emit_trace(events: Sequence[TraceEvent], out: IO[str]) -> None:
    """Write events as a Chrome trace-event JSON array."""
    validate_events(events)
    json.dump([ev.to_json_obj() for ev in events], out)


def parse_trace(src: IO[str]) -> list[TraceEvent]:
    """Inverse of :func:`emit_trace`."""
    return [TraceEvent.from_json_obj(obj) for obj in json.load(src)]


def predict_gather_bytes(world: int, per_rank_rows: Sequence[int],
                         row_width: int, dtype_width: int) -> int:
    """Receive-buffer bytes of a slice allgather: payload plus index storage.

    Grows with the sum of per-rank row counts; with full-coverage converted
    slices this is world_size times the dense size, the buffer blow-up that
    breaks large worlds.
    """
    if world != len(per_rank_rows):
        raise ValueError(
            f"world={world} but {len(per_rank_rows)} per-rank row counts given")
    total_rows = sum(int(r) for r in per_rank_rows)
    return total_rows * row_width * dtype_width + total_rows * INDEX_WIDTH


def predict_reduce_bytes(shape: Sequence[int], dtype_width: int) -> int:
    """Payload bytes of a dense reduction: the tensor size, world-invariant."""
    n = 1
    for s in shape:
        n *= int(s)
    return n * int(dtype_width)


@dataclass(frozen=True)
class MemoryReportRow:
    variable: str
    gather_bytes: int
    reduce_bytes: int
    byte_ratio: float
    gather_duration_us: float
    reduce_duration_us: float
    duration_ratio: float

    def to_json_obj(self) -> dict:
        return {
            "variable": self.variable,
            "gather_bytes": self.gather_bytes,
            "reduce_bytes": self.reduce_bytes,
            "byte_ratio": self.byte_ratio,
            "gather_duration_us": self.gather_duration_us,
            "reduce_duration_us": self.reduce_duration_us,
            "duration_ratio": self.duration_ratio,
        }


@dataclass(frozen=True)
class MemoryReport:
    """Per-variable and total gather-vs-reduce byte and duration comparison."""

    world_size: int
    per_variable: tuple[MemoryReportRow, ...]
    total: MemoryReportRow

    def to_json_obj(self) -> dict:
        return {
            "world_size": self.world_size,
            "per_variable": [r.to_json_obj() for r in self.per_variable],
            "total": self.total.to_json_obj(),
        }


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def _make_row(variable, gather_stats, reduce_stats) -> MemoryReportRow:
    # Gather-side bytes come from the legacy run's receive buffers; the
    # legacy run's own reduce traffic (pure-dense variables) counts toward
    # its duration but not its gather bytes.
    gather_bytes = gather_stats.gather_recv_bytes
    reduce_bytes = reduce_stats.reduce_payload_bytes
    gather_dur = gather_stats.total_duration_us
    reduce_dur = reduce_stats.total_duration_us
    return MemoryReportRow(
        variable=variable,
        gather_bytes=gather_bytes,
        reduce_bytes=reduce_bytes,
        byte_ratio=_ratio(gather_bytes, reduce_bytes),
        gather_duration_us=gather_dur,
        reduce_duration_us=reduce_dur,
        duration_ratio=_ratio(gather_dur, reduce_dur),
    )


def build_memory_report(legacy_stats, dense_stats) -> MemoryReport:
    """Compare a legacy-gather run against a sparse-as-dense run.

    Both stats objects must come from the same seeded workload and world
    size (duck-typed ``CollectiveStats`` from the collectives engine).
    """
    if legacy_stats.world_size != dense_stats.world_size:
        raise ValueError(
            f"world size mismatch: {legacy_stats.world_size} vs "
            f"{dense_stats.world_size}")
    if set(legacy_stats.per_var) != set(dense_stats.per_var):
        raise ValueError("runs cover different variable sets; workloads differ")
    rows = tuple(
        _make_row(var, legacy_stats.per_var[var], dense_stats.per_var[var])
        for var in legacy_stats.per_var
    )
    total = MemoryReportRow(
        variable="__total__",
        gather_bytes=sum(r.gather_bytes for r in rows),
        reduce_bytes=sum(r.reduce_bytes for r in rows),
        byte_ratio=_ratio(sum(r.gather_bytes for r in rows),
                          sum(r.reduce_bytes for r in rows)),
        gather_duration_us=sum(r.gather_duration_us for r in rows),
        reduce_duration_us=sum(r.reduce_duration_us for r in rows),
        duration_ratio=_ratio(sum(r.gather_duration_us for r in rows),
                              sum(r.reduce_duration_us for r in rows)),
    )
    return MemoryReport(world_size=legacy_stats.world_size,
                        per_variable=rows, total=total)
