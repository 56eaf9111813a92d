"""Simulated multi-rank collectives with byte and virtual-time accounting.

Ranks run as threads inside one process and communicate only through
collectives, which rendezvous at a barrier; the combined result is computed
exactly once, in a fixed ascending-rank order, so results are bitwise
identical across ranks and independent of thread interleaving.  A fully
serialized mode (one rank runnable at a time, round-robin token) produces
identical results and serves as the determinism oracle.

Time never comes from the wall clock: every collective advances a per-rank
virtual clock by ``latency + bytes / bandwidth`` from the cost model.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .costmodel import CostModel, Phase, TraceEvent
from .grads import (
    INDEX_WIDTH,
    DenseGrad,
    GradBundle,
    InvariantError,
    ShapeMismatchError,
    SliceGrad,
    accumulate_legacy,
    accumulate_proposed,
    convert_to_dense,
    dense_to_slices,
)

FUSION_THRESHOLD_ENV = "GRADSYNC_FUSION_THRESHOLD"
DEFAULT_FUSION_THRESHOLD = 134217728

_BARRIER_TIMEOUT_S = 120.0


class CollectiveAbort(RuntimeError):
    """A collective failed; the abort is propagated to every rank."""


class Strategy(str, Enum):
    LEGACY_GATHER = "legacy"
    SPARSE_AS_DENSE = "dense"
    PROPOSED = "proposed"


class CollectiveKind(str, Enum):
    ALLREDUCE_RING = "allreduce"
    ALLGATHERV = "allgatherv"
    BROADCAST = "broadcast"


@dataclass(frozen=True)
class FusionConfig:
    """Byte threshold for packing small dense gradients into one buffer."""

    threshold_bytes: int = DEFAULT_FUSION_THRESHOLD

    def __post_init__(self):
        if self.threshold_bytes < 0:
            raise InvariantError("fusion threshold must be non-negative")

    @classmethod
    def from_env(cls) -> "FusionConfig":
        raw = os.environ.get(FUSION_THRESHOLD_ENV)
        if raw is None:
            return cls()
        try:
            return cls(int(raw))
        except ValueError as e:
            raise InvariantError(
                f"{FUSION_THRESHOLD_ENV} must be a decimal integer, got {raw!r}"
            ) from e


@dataclass
class VarStats:
    gather_recv_bytes: int = 0
    reduce_payload_bytes: int = 0
    total_duration_us: float = 0.0


@dataclass(frozen=True)
class OpRecord:
    kind: CollectiveKind
    name: str
    vars: tuple[str, ...]
    strategy: str | None
    start_us: float
    duration_us: float
    recv_bytes: int
    sent_bytes_by_rank: tuple[float, ...]


@dataclass
class CollectiveStats:
    """Per-run accounting: operation records, trace events, per-variable bytes."""

    world_size: int
    records: list[OpRecord] = field(default_factory=list)
    events: list[TraceEvent] = field(default_factory=list)
    per_var: dict[str, VarStats] = field(default_factory=dict)
    sent_bytes_by_rank: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.sent_bytes_by_rank:
            self.sent_bytes_by_rank = [0.0] * self.world_size

    def var(self, name: str) -> VarStats:
        return self.per_var.setdefault(name, VarStats())

    @property
    def total_gather_recv_bytes(self) -> int:
        return sum(v.gather_recv_bytes for v in self.per_var.values())

    @property
    def total_reduce_payload_bytes(self) -> int:
        return sum(v.reduce_payload_bytes for v in self.per_var.values())


class RankCtx:
    """One simulated MPI process: rank id, world handle, virtual clock."""

    __slots__ = ("world", "rank")

    def __init__(self, world: "World", rank: int):
        self.world = world
        self.rank = rank

    @property
    def world_size(self) -> int:
        return self.world.size

    @property
    def clock_us(self) -> float:
        return self.world.clocks[self.rank]

    def advance(self, duration_us: float) -> None:
        """Advance this rank's virtual clock (modeled local compute)."""
        self.world.clocks[self.rank] += duration_us


class _SerialGate:
    """Round-robin token scheduler: at most one rank thread runs at a time."""

    def __init__(self, n: int):
        self.n = n
        self.cond = threading.Condition()
        self.turn = 0
        self.parked = [False] * n
        self.done = [False] * n
        self.error: BaseException | None = None

    def _advance_locked(self, from_rank: int) -> None:
        for off in range(1, self.n + 1):
            cand = (from_rank + off) % self.n
            if not self.done[cand] and not self.parked[cand]:
                self.turn = cand
                break
        self.cond.notify_all()

    def _check_error_locked(self):
        if self.error is not None:
            raise CollectiveAbort(str(self.error)) from self.error


class World:
    """A simulated world of ``size`` ranks sharing a virtual clock and stats.

    ``mode`` is ``"threads"`` (concurrent ranks, barrier rendezvous) or
    ``"serial"`` (token-serialized execution); both produce bitwise-identical
    results because every collective's combine runs exactly once in a fixed
    order.
    """

    def __init__(self, size: int, *, cost_model: CostModel | None = None,
                 mode: str = "threads", pid: int = 0):
        if size < 1:
            raise InvariantError("world size must be >= 1")
        if mode not in ("threads", "serial"):
            raise InvariantError(f"unknown execution mode {mode!r}")
        self.size = size
        self.cost = cost_model or CostModel()
        self.mode = mode
        self.pid = pid
        self.stats = CollectiveStats(world_size=size)
        self.clocks = [0.0] * size
        self._slots: list = [None] * size
        self._results: list = [None] * size
        self._pending: tuple | None = None
        self._error: BaseException | None = None
        self._lock = threading.Lock()
        if mode == "threads":
            self._barrier = threading.Barrier(size, action=self._barrier_action)
        else:
            self._gate = _SerialGate(size)

    # -- execution ---------------------------------------------------------

    def run(self, fn: Callable[[RankCtx], object]) -> list:
        """Run ``fn(ctx)`` on every rank; return per-rank results in rank order."""
        results = [None] * self.size
        threads = []
        for rank in range(self.size):
            t = threading.Thread(target=self._runner, args=(fn, rank, results),
                                 name=f"gradsync-rank-{rank}")
            threads.append(t)
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if self._error is not None:
            if isinstance(self._error, CollectiveAbort):
                raise self._error
            raise CollectiveAbort(str(self._error)) from self._error
        return results

    def _runner(self, fn, rank, results):
        ctx = RankCtx(self, rank)
        try:
            if self.mode == "serial":
                self._wait_first_turn(rank)
            results[rank] = fn(ctx)
        except BaseException as e:  # propagate to siblings, re-raise from run()
            with self._lock:
                if self._error is None:
                    self._error = e
            if self.mode == "threads":
                self._barrier.abort()
            else:
                with self._gate.cond:
                    if self._gate.error is None:
                        self._gate.error = e
                    self._gate.cond.notify_all()
        finally:
            if self.mode == "serial":
                self._finish_serial(rank)

    def _wait_first_turn(self, rank):
        gate = self._gate
        with gate.cond:
            while gate.turn != rank and gate.error is None:
                gate.cond.wait()
            gate._check_error_locked()

    def _finish_serial(self, rank):
        gate = self._gate
        with gate.cond:
            gate.done[rank] = True
            gate._advance_locked(rank)

    # -- collective rendezvous --------------------------------------------

    def _collective(self, ctx: RankCtx, tag: str, payload, combine):
        if self.mode == "threads":
            return self._collective_threads(ctx, tag, payload, combine)
        return self._collective_serial(ctx, tag, payload, combine)

    def _collective_threads(self, ctx, tag, payload, combine):
        self._slots[ctx.rank] = (tag, payload)
        self._pending = (tag, combine)
        try:
            self._barrier.wait(timeout=_BARRIER_TIMEOUT_S)
        except threading.BrokenBarrierError:
            with self._lock:
                err = self._error
            raise CollectiveAbort(
                f"collective {tag!r} aborted: {err}") from err
        return self._results[ctx.rank]

    def _barrier_action(self):
        try:
            tag, combine = self._pending
            self._run_combine(tag, combine)
        except BaseException as e:
            with self._lock:
                if self._error is None:
                    self._error = e
            raise  # breaks the barrier; every waiter sees the abort

    def _collective_serial(self, ctx, tag, payload, combine):
        gate = self._gate
        with gate.cond:
            gate._check_error_locked()
            self._slots[ctx.rank] = (tag, payload)
            self._pending = (tag, combine)
            gate.parked[ctx.rank] = True
            active = [r for r in range(self.size) if not gate.done[r]]
            if all(gate.parked[r] for r in active):
                try:
                    self._run_combine(tag, combine)
                except BaseException as e:
                    gate.error = e
                    gate.cond.notify_all()
                    raise CollectiveAbort(
                        f"collective {tag!r} aborted: {e}") from e
                for r in active:
                    gate.parked[r] = False
                gate.turn = ctx.rank
                gate.cond.notify_all()
            else:
                gate._advance_locked(ctx.rank)
                while gate.parked[ctx.rank] and gate.error is None:
                    gate.cond.wait()
                gate._check_error_locked()
                while gate.turn != ctx.rank and gate.error is None:
                    gate.cond.wait()
                gate._check_error_locked()
        return self._results[ctx.rank]

    def _run_combine(self, tag, combine):
        tags = [slot[0] for slot in self._slots]
        if any(t != tag for t in tags):
            raise CollectiveAbort(f"ranks disagree on collective: {tags}")
        payloads = [slot[1] for slot in self._slots]
        self._results = combine(self, payloads)
        self._slots = [None] * self.size

    # -- accounting --------------------------------------------------------

    def _account(self, *, kind: CollectiveKind, name: str,
                 vars_: tuple[str, ...], strategy: str | None,
                 recv_bytes: int, sent_by_rank: Sequence[float],
                 duration_bytes: float,
                 gather_bytes_by_var: dict[str, int] | None = None,
                 reduce_bytes_by_var: dict[str, int] | None = None) -> float:
        """Advance the synchronized clock and record the op; returns duration."""
        start = max(self.clocks)
        dur = self.cost.duration_us(duration_bytes)
        end = start + dur
        for r in range(self.size):
            self.clocks[r] = end
            self.stats.sent_bytes_by_rank[r] += sent_by_rank[r]
        self.stats.records.append(OpRecord(
            kind=kind, name=name, vars=vars_, strategy=strategy,
            start_us=start, duration_us=dur, recv_bytes=recv_bytes,
            sent_bytes_by_rank=tuple(sent_by_rank)))
        args = {
            "bytes": str(int(recv_bytes)),
            "strategy": strategy or "",
            "var": ",".join(vars_),
        }
        for r in range(self.size):
            self.stats.events.append(TraceEvent(
                name=name, phase=Phase.COMPLETE, timestamp_us=start,
                duration_us=dur, pid=self.pid, tid=r, args=args))
        if gather_bytes_by_var:
            for var, nbytes in gather_bytes_by_var.items():
                self.stats.var(var).gather_recv_bytes += nbytes
        if reduce_bytes_by_var:
            total = sum(reduce_bytes_by_var.values())
            for var, nbytes in reduce_bytes_by_var.items():
                vs = self.stats.var(var)
                vs.reduce_payload_bytes += nbytes
                vs.total_duration_us += dur * (nbytes / total if total else 0.0)
        if gather_bytes_by_var and not reduce_bytes_by_var:
            for var in gather_bytes_by_var:
                self.stats.var(var).total_duration_us += dur
        return dur


# -- combine implementations (run exactly once per collective) -------------


def _combine_allreduce(world: World, payloads, *, name: str,
                       vars_: tuple[str, ...], strategy: str | None,
                       reduce_bytes_by_var: dict[str, int]):
    grads: list[DenseGrad] = payloads
    shape = grads[0].shape
    for g in grads[1:]:
        if g.shape != shape:
            raise ShapeMismatchError(
                f"allreduce shape mismatch: {g.shape} vs {shape}")
    n = world.size
    # Chunk-wise ring: world_size chunks, 2(n-1) steps; every chunk's partial
    # sums accumulate in ascending rank order, so the result matches a serial
    # left-fold bitwise and is identical on every rank.
    flats = [g.array.reshape(-1) for g in grads]
    chunks = np.array_split(np.arange(flats[0].size), n)
    out = np.empty_like(flats[0])
    for chunk in chunks:
        if chunk.size == 0:
            continue
        acc = flats[0][chunk].copy()
        for r in range(1, n):
            acc += flats[r][chunk]
        out[chunk] = acc
    result = DenseGrad(out.reshape(shape), dtype_width=grads[0].dtype_width)
    nbytes = sum(reduce_bytes_by_var.values())
    sent = 2.0 * (n - 1) / n * nbytes
    world._account(
        kind=CollectiveKind.ALLREDUCE_RING, name=name, vars_=vars_,
        strategy=strategy, recv_bytes=nbytes, sent_by_rank=[sent] * n,
        duration_bytes=sent, reduce_bytes_by_var=reduce_bytes_by_var)
    return [result] * n


def _combine_allgatherv(world: World, payloads, *, name: str, var: str,
                        strategy: str | None):
    slices: list[SliceGrad] = payloads
    shape = slices[0].dense_shape
    for s in slices[1:]:
        if s.dense_shape != shape:
            raise ShapeMismatchError(
                f"allgatherv dense_shape mismatch: {s.dense_shape} vs {shape}")
    n = world.size
    indices = np.concatenate([s.indices for s in slices])
    rows = np.concatenate([s.row_values for s in slices], axis=0)
    result = SliceGrad(shape, indices, rows, dtype_width=slices[0].dtype_width)
    # Receive buffer replicates every rank's payload plus 64-bit indices; a
    # size-negotiation round of world_size counts precedes the payload.
    recv = sum(s.nominal_byte_size() + s.index_byte_size() for s in slices)
    negotiation = n * INDEX_WIDTH
    sent = [float(s.nominal_byte_size() + s.index_byte_size() + negotiation)
            for s in slices]
    world._account(
        kind=CollectiveKind.ALLGATHERV, name=name, vars_=(var,),
        strategy=strategy, recv_bytes=recv, sent_by_rank=sent,
        duration_bytes=recv + negotiation,
        gather_bytes_by_var={var: recv})
    return [result] * n


def _combine_broadcast(world: World, payloads, *, name: str):
    roots = {root for _, root in payloads}
    if len(roots) != 1:
        raise CollectiveAbort(f"ranks disagree on broadcast root: {sorted(roots)}")
    root = roots.pop()
    if not (0 <= root < world.size):
        raise InvariantError(f"broadcast root {root} outside [0, {world.size})")
    g = payloads[root][0]
    nbytes = g.nominal_byte_size()
    n = world.size
    sent = [0.0] * n
    sent[root] = float(nbytes * (n - 1))
    world._account(
        kind=CollectiveKind.BROADCAST, name=name, vars_=(), strategy=None,
        recv_bytes=nbytes, sent_by_rank=sent,
        duration_bytes=nbytes if n > 1 else 0)
    return [g] * n


def _combine_schema(world: World, payloads, *, strategy: Strategy,
                    threshold: int):
    """Validate bundle schemas across ranks and build the per-world exchange plan.

    Returns a list of ops in deterministic order: ``("gather", var)`` for
    slice allgathers and ``("reduce", (vars...))`` for (possibly fused)
    dense allreduces, placed at the bundle position of the first member.
    """
    base = [(var, shape) for var, shape, _sparse, _nbytes in payloads[0]]
    for rank, schema in enumerate(payloads[1:], start=1):
        got = [(var, shape) for var, shape, _s, _n in schema]
        if got != base:
            raise CollectiveAbort(
                f"rank {rank} bundle schema differs from rank 0: "
                f"{got} vs {base}")
    routes: list[tuple[str, str, int]] = []  # (var, route, dense_bytes)
    for i, (var, _shape, _sparse, dense_bytes) in enumerate(payloads[0]):
        sparse_flags = [schema[i][2] for schema in payloads]
        if strategy is Strategy.LEGACY_GATHER:
            route = "gather" if any(sparse_flags) else "reduce"
        elif strategy is Strategy.SPARSE_AS_DENSE:
            route = "reduce"
        else:  # Strategy.PROPOSED
            route = "reduce" if not all(sparse_flags) else "gather"
        routes.append((var, route, dense_bytes))
    plan: list[tuple[str, tuple[str, ...]]] = []
    group: list[str] = []
    group_bytes = 0
    for var, route, dense_bytes in routes:
        if route == "gather":
            plan.append(("gather", (var,)))
            continue
        if threshold > 0 and dense_bytes <= threshold:
            if group and group_bytes + dense_bytes > threshold:
                plan.append(("reduce", tuple(group)))
                group, group_bytes = [], 0
            group.append(var)
            group_bytes += dense_bytes
        else:
            plan.append(("reduce", (var,)))
    if group:
        plan.append(("reduce", tuple(group)))
    return [plan] * world.size


# -- rank-level collective API --------------------------------------------


def allreduce_ring(ctx: RankCtx, g: DenseGrad, *, name: str = "allreduce",
                   var: str = "allreduce", strategy: str | None = None) -> DenseGrad:
    """Ring allreduce: every rank receives the elementwise sum over all ranks.

    Per-rank traffic is accounted at exactly ``2(N-1)/N`` of the tensor's
    nominal bytes.
    """
    def combine(world, payloads):
        return _combine_allreduce(
            world, payloads, name=name, vars_=(var,), strategy=strategy,
            reduce_bytes_by_var={var: payloads[0].nominal_byte_size()})
    return ctx.world._collective(ctx, f"allreduce:{name}", g, combine)


def allgather_slices(ctx: RankCtx, s: SliceGrad, *, name: str = "allgatherv",
                     var: str = "allgatherv",
                     strategy: str | None = None) -> SliceGrad:
    """Allgatherv of indexed slices: ordered concatenation across ranks.

    The receive buffer holds every rank's rows plus index storage -- this is
    the quantity that explodes with world size on the gather path.
    """
    def combine(world, payloads):
        return _combine_allgatherv(world, payloads, name=name, var=var,
                                   strategy=strategy)
    return ctx.world._collective(ctx, f"allgatherv:{name}", s, combine)


def broadcast(ctx: RankCtx, g: DenseGrad, root: int) -> DenseGrad:
    """Every rank receives the root's tensor (initial variable sync)."""
    def combine(world, payloads):
        return _combine_broadcast(world, payloads, name="broadcast")
    return ctx.world._collective(ctx, "broadcast", (g, root), combine)


def exchange_bundle(ctx: RankCtx, bundle: GradBundle, strategy: Strategy,
                    fusion: FusionConfig | None = None) -> GradBundle:
    """Exchange one step's gradients across the world under a strategy.

    Per variable the local contributions are first accumulated with the
    strategy's dispatch (legacy, proposed, or densify-then-reduce), then the
    variable travels by slice allgather or by (possibly fused) dense ring
    allreduce depending on which ranks hold sparse results.  Materialized
    results are identical across strategies and across ranks.
    """
    strategy = Strategy(strategy)
    if fusion is None:
        fusion = FusionConfig.from_env()

    local: dict[str, DenseGrad | SliceGrad] = {}
    for var, contribs in bundle.items():
        if strategy is Strategy.SPARSE_AS_DENSE:
            dense = [convert_to_dense(g) if isinstance(g, SliceGrad) else g
                     for g in contribs]
            acc = accumulate_proposed(dense)
        elif strategy is Strategy.LEGACY_GATHER:
            acc = accumulate_legacy(list(contribs))
        else:
            acc = accumulate_proposed(list(contribs))
        local[var] = acc

    schema = [(var, g.dense_shape, isinstance(g, SliceGrad),
               int(np.prod(g.dense_shape, dtype=np.int64)) * g.dtype_width)
              for var, g in local.items()]

    def schema_combine(world, payloads):
        return _combine_schema(world, payloads, strategy=strategy,
                               threshold=fusion.threshold_bytes)

    plan = ctx.world._collective(ctx, "exchange:schema", schema, schema_combine)

    results: dict[str, DenseGrad | SliceGrad] = {}
    for op, vars_ in plan:
        if op == "gather":
            var = vars_[0]
            g = local[var]
            s = g if isinstance(g, SliceGrad) else dense_to_slices(g)
            results[var] = allgather_slices(
                ctx, s, name=f"allgatherv.{var}", var=var,
                strategy=strategy.value)
        else:
            dense = {}
            for var in vars_:
                g = local[var]
                dense[var] = convert_to_dense(g) if isinstance(g, SliceGrad) else g
            if len(vars_) == 1:
                var = vars_[0]
                results[var] = allreduce_ring(
                    ctx, dense[var], name=f"allreduce.{var}", var=var,
                    strategy=strategy.value)
            else:
                flat = np.concatenate(
                    [dense[var].array.reshape(-1) for var in vars_])
                fused = DenseGrad(flat, dtype_width=dense[vars_[0]].dtype_width)
                byte_map = {var: dense[var].nominal_byte_size() for var in vars_}
                name = f"allreduce.fused[{len(vars_)}]"

                def combine(world, payloads, _name=name, _vars=vars_,
                            _bytes=byte_map):
                    return _combine_allreduce(
                        world, payloads, name=_name, vars_=_vars,
                        strategy=strategy.value, reduce_bytes_by_var=_bytes)

                out = ctx.world._collective(
                    ctx, f"allreduce:{name}", fused, combine)
                offset = 0
                for var in vars_:
                    size = dense[var].array.size
                    piece = out.array[offset:offset + size]
                    results[var] = DenseGrad(
                        piece.reshape(dense[var].shape),
                        dtype_width=dense[var].dtype_width)
                    offset += size

    out_bundle = GradBundle()
    for var in bundle.var_ids:
        out_bundle.add(var, results[var])
    return out_bundle
