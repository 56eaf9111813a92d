"""Synthetic tied-embedding workloads and a tiny analytic tied-weight model.

The defining pattern: one shared weight matrix receives, in the same step, a
sparse lookup gradient (rows at the batch's token ids) and a dense projection
gradient.  The generator draws both from a counter-based PRNG keyed by
(seed, rank, step, stream) so draws are order-independent and reproducible
under any scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .collectives import (
    FusionConfig,
    RankCtx,
    Strategy,
    World,
    broadcast,
    exchange_bundle,
)
from .costmodel import CostModel
from .grads import DenseGrad, GradBundle, InvariantError, SliceGrad, materialize

TIED_VAR = "tied_embed_proj"

_MASK64 = (1 << 64) - 1

# Stream tags keep independent draws (indices, values, batches...) from
# colliding under the same (seed, rank, step) key.
_STREAM_SLICE = 1
_STREAM_DENSE = 2
_STREAM_EXTRA = 3  # + var index
_STREAM_BATCH = 100
_STREAM_INIT = 101


def _mix64(*vals: int) -> int:
    """splitmix64-style avalanche over a sequence of integers."""
    h = 0x9E3779B97F4A7C15
    for v in vals:
        h = (h ^ (v & _MASK64)) * 0xBF58476D1CE4E5B9 & _MASK64
        h = (h ^ (h >> 27)) * 0x94D049BB133111EB & _MASK64
        h ^= h >> 31
    return h


def keyed_rng(seed: int, *parts: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by seed and stream parts."""
    key = ((seed & _MASK64) << 64) | _mix64(*parts)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class WorkloadSpec:
    """Shape and seeding of the synthetic gradient workload."""

    vocab: int
    hidden: int
    tokens_per_rank: int
    extra_dense_vars: tuple[tuple[int, ...], ...] = ()
    seed: int = 0
    tied: bool = True  # False drops the tied variable: an all-dense workload

    def __post_init__(self):
        if self.vocab < 2:
            raise InvariantError("vocab must be >= 2")
        if self.hidden < 1:
            raise InvariantError("hidden must be >= 1")
        if self.tokens_per_rank < 0:
            raise InvariantError("tokens_per_rank must be >= 0")
        object.__setattr__(
            self, "extra_dense_vars",
            tuple(tuple(int(s) for s in shape) for shape in self.extra_dense_vars))
        for shape in self.extra_dense_vars:
            if not shape or any(s < 1 for s in shape):
                raise InvariantError(f"bad extra dense shape {shape}")

    def to_dict(self) -> dict:
        return {
            "vocab": self.vocab,
            "hidden": self.hidden,
            "tokens_per_rank": self.tokens_per_rank,
            "extra_dense_vars": [list(s) for s in self.extra_dense_vars],
            "seed": self.seed,
            "tied": self.tied,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadSpec":
        return cls(
            vocab=int(d["vocab"]),
            hidden=int(d["hidden"]),
            tokens_per_rank=int(d["tokens_per_rank"]),
            extra_dense_vars=tuple(tuple(s) for s in d.get("extra_dense_vars", [])),
            seed=int(d.get("seed", 0)),
            tied=bool(d.get("tied", True)),
        )


def gen_bundle(spec: WorkloadSpec, rank: int, step: int) -> GradBundle:
    """Synthetic per-rank gradients for one step, deterministic in (seed, rank, step).

    The tied variable gets two contributions: a slice gradient with
    ``tokens_per_rank`` rows at PRNG-drawn (possibly repeating) indices, and
    a dense [vocab, hidden] projection gradient.
    """
    v, h = spec.vocab, spec.hidden
    bundle = GradBundle()
    if spec.tied:
        rng_s = keyed_rng(spec.seed, _STREAM_SLICE, rank, step)
        indices = rng_s.integers(0, v, size=spec.tokens_per_rank, dtype=np.int64)
        rows = rng_s.standard_normal((spec.tokens_per_rank, h))
        rng_d = keyed_rng(spec.seed, _STREAM_DENSE, rank, step)
        dense = rng_d.standard_normal((v, h))
        bundle.add(TIED_VAR, SliceGrad((v, h), indices, rows), DenseGrad(dense))
    for i, shape in enumerate(spec.extra_dense_vars):
        rng_e = keyed_rng(spec.seed, _STREAM_EXTRA + i, rank, step)
        bundle.add(f"dense{i}", DenseGrad(rng_e.standard_normal(shape)))
    return bundle


@dataclass
class TiedToyModel:
    """Mean-pooled embedding into a tied softmax projection.

    The simplest model whose single weight matrix receives both a sparse and
    a dense gradient: logits = W @ mean(W[tokens]), loss = mean cross-entropy
    against the targets.
    """

    weights: np.ndarray  # vocab x hidden
    tokens: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        self.targets = np.asarray(self.targets, dtype=np.int64).reshape(-1)
        v = self.weights.shape[0]
        if self.weights.ndim != 2:
            raise InvariantError("weights must be a vocab x hidden matrix")
        if self.tokens.size == 0 or self.targets.size == 0:
            raise InvariantError("toy model needs at least one token and target")
        if self.tokens.max() >= v or self.tokens.min() < 0:
            raise InvariantError("token id out of range")
        if self.targets.max() >= v or self.targets.min() < 0:
            raise InvariantError("target id out of range")

    @property
    def vocab(self) -> int:
        return self.weights.shape[0]

    @property
    def hidden(self) -> int:
        return self.weights.shape[1]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def toy_forward_backward(model: TiedToyModel) -> tuple[float, GradBundle]:
    """Loss and exact analytic gradients of the tied toy model.

    The gradient of the shared matrix decomposes into a slice gradient
    through the lookup path (rows only at the batch token ids) and a dense
    gradient through the projection path, both tagged to the same variable.
    """
    w = model.weights
    tokens, targets = model.tokens, model.targets
    b = len(tokens)
    embed = w[tokens].mean(axis=0)
    logits = w @ embed
    probs = _softmax(logits)
    logp = np.log(probs)
    loss = float(-logp[targets].mean())
    target_freq = np.bincount(targets, minlength=model.vocab) / len(targets)
    dlogits = probs - target_freq
    dense = np.outer(dlogits, embed)  # projection path
    dembed = w.T @ dlogits
    slice_rows = np.tile(dembed / b, (b, 1))  # lookup path, one row per token
    bundle = GradBundle()
    bundle.add(TIED_VAR,
               SliceGrad(w.shape, tokens, slice_rows),
               DenseGrad(dense))
    return loss, bundle


def draw_toy_batch(spec: WorkloadSpec, rank: int, step: int
                   ) -> tuple[np.ndarray, np.ndarray]:
    rng = keyed_rng(spec.seed, _STREAM_BATCH, rank, step)
    n = max(1, spec.tokens_per_rank)
    tokens = rng.integers(0, spec.vocab, size=n, dtype=np.int64)
    targets = rng.integers(0, spec.vocab, size=n, dtype=np.int64)
    return tokens, targets


def init_weights(spec: WorkloadSpec) -> np.ndarray:
    rng = keyed_rng(spec.seed, _STREAM_INIT)
    return 0.01 * rng.standard_normal((spec.vocab, spec.hidden))


def train_steps(spec: WorkloadSpec, world_size: int, steps: int,
                strategy: Strategy, learning_rate: float, *,
                mode: str = "threads", fusion: FusionConfig | None = None,
                cost_model: CostModel | None = None,
                record_history: bool = False):
    """Synchronous data-parallel SGD on the toy model.

    Each step every rank computes analytic gradients on its own PRNG batch,
    exchanges them under ``strategy``, and applies the averaged update
    ``W -= lr / world * materialize(total)``.  Returns per-rank final
    weights; with ``record_history`` also a [step][rank] weight history.
    """
    strategy = Strategy(strategy)
    fusion = fusion if fusion is not None else FusionConfig()
    world = World(world_size, cost_model=cost_model, mode=mode)
    w0 = init_weights(spec)
    history = [[None] * world_size for _ in range(steps)]

    def rank_fn(ctx: RankCtx):
        w = broadcast(ctx, DenseGrad(w0), 0).array.copy()
        for step in range(steps):
            tokens, targets = draw_toy_batch(spec, ctx.rank, step)
            _, bundle = toy_forward_backward(TiedToyModel(w, tokens, targets))
            out = exchange_bundle(ctx, bundle, strategy, fusion)
            total = materialize(out.contributions(TIED_VAR)[0]).array
            w = w - learning_rate / world_size * total
            if record_history:
                history[step][ctx.rank] = w.copy()
        return w

    finals = world.run(rank_fn)
    if record_history:
        return finals, history
    return finals
