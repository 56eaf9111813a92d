"""Gradient representations and the two tensor-accumulation strategies.

A gradient is either fully materialized (:class:`DenseGrad`) or an
indexed-slices value (:class:`SliceGrad`) carrying only selected rows of a
larger tensor, the form produced by embedding lookups.  Accumulating a list
of gradients goes one of two ways: elementwise reduction (buffer size fixed
at the dense size) or slice concatenation ("gather", buffer grows with the
number of contributors).  The legacy dispatch gathers as soon as a single
input is sparse; the proposed dispatch densifies and reduces as soon as a
single input is dense.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence, Union

import numpy as np

DEFAULT_DTYPE_WIDTH = 4  # byte accounting models float32 payloads
INDEX_WIDTH = 8  # slice indices accounted as 64-bit


class InvariantError(ValueError):
    """A value violates its structural invariants."""


class ShapeMismatchError(ValueError):
    """Operands that must agree on dense shape do not."""


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise InvariantError(f"shape must be non-empty with positive extents, got {shape}")
    return shape


class DenseGrad:
    """A fully materialized gradient tensor.

    Values are stored as float64 for test precision; ``dtype_width`` is the
    nominal per-element width used only for byte accounting (default 4,
    modelling float32 training payloads).
    """

    __slots__ = ("shape", "array", "dtype_width")

    def __init__(self, array, dtype_width: int = DEFAULT_DTYPE_WIDTH):
        arr = np.asarray(array, dtype=np.float64)
        self.shape = _check_shape(arr.shape)
        self.array = arr
        self.dtype_width = int(dtype_width)

    @property
    def dense_shape(self) -> tuple[int, ...]:
        return self.shape

    @property
    def rows(self) -> int:
        return self.shape[0]

    @property
    def row_width(self) -> int:
        return int(np.prod(self.shape[1:], dtype=np.int64)) if len(self.shape) > 1 else 1

    def nominal_byte_size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * self.dtype_width

    def __repr__(self):
        return f"DenseGrad(shape={list(self.shape)})"


class SliceGrad:
    """An indexed-slices gradient: selected rows (axis 0) of a dense tensor.

    Indices may repeat -- embedding lookups of repeated tokens produce
    duplicate rows, and duplicates are legal input everywhere.  They are
    summed only on materialization.
    """

    __slots__ = ("dense_shape", "indices", "row_values", "dtype_width")

    def __init__(self, dense_shape, indices, row_values,
                 dtype_width: int = DEFAULT_DTYPE_WIDTH):
        shape = _check_shape(dense_shape)
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        row_width = int(np.prod(shape[1:], dtype=np.int64)) if len(shape) > 1 else 1
        vals = np.asarray(row_values, dtype=np.float64).reshape(len(idx), row_width)
        if idx.size and (idx.min() < 0 or idx.max() >= shape[0]):
            raise InvariantError(
                f"slice indices must lie in [0, {shape[0]}), got range "
                f"[{idx.min()}, {idx.max()}]")
        self.dense_shape = shape
        self.indices = idx
        self.row_values = vals
        self.dtype_width = int(dtype_width)

    @property
    def num_rows(self) -> int:
        return len(self.indices)

    @property
    def row_width(self) -> int:
        return self.row_values.shape[1]

    def nominal_byte_size(self) -> int:
        return self.num_rows * self.row_width * self.dtype_width

    def index_byte_size(self) -> int:
        return self.num_rows * INDEX_WIDTH

    def __repr__(self):
        return (f"SliceGrad(dense_shape={list(self.dense_shape)}, "
                f"rows={self.num_rows})")


Grad = Union[DenseGrad, SliceGrad]


class EmptyGrad:
    """Marker returned when accumulating an empty gradient list.

    Upstream None-filtering can legitimately empty a list, so this is not an
    error condition.
    """

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "EMPTY_GRAD"


EMPTY_GRAD = EmptyGrad()


def convert_to_dense(s: SliceGrad) -> DenseGrad:
    """Scatter-add slice rows into a zero tensor of the full dense shape.

    Duplicate indices are summed; rows never indexed stay zero.
    """
    out = np.zeros((s.dense_shape[0], s.row_width), dtype=np.float64)
    np.add.at(out, s.indices, s.row_values)
    return DenseGrad(out.reshape(s.dense_shape), dtype_width=s.dtype_width)


def dense_to_slices(d: DenseGrad) -> SliceGrad:
    """Lossless dense-to-slices conversion with full row coverage [0, rows)."""
    rows = d.array.reshape(d.rows, d.row_width)
    return SliceGrad(d.shape, np.arange(d.rows, dtype=np.int64), rows,
                     dtype_width=d.dtype_width)


def concat_slices(inputs: Sequence[SliceGrad]) -> SliceGrad:
    """Concatenate slice gradients without summation or deduplication.

    This is the gather accumulation primitive; the output row count is the
    sum of the input row counts, which is exactly why gather buffers grow
    with the contributor count.
    """
    if not inputs:
        raise InvariantError("concat_slices requires at least one input")
    shape = inputs[0].dense_shape
    for s in inputs[1:]:
        if s.dense_shape != shape:
            raise ShapeMismatchError(
                f"dense_shape mismatch: {s.dense_shape} vs {shape}")
    indices = np.concatenate([s.indices for s in inputs])
    rows = np.concatenate([s.row_values for s in inputs], axis=0)
    return SliceGrad(shape, indices, rows, dtype_width=inputs[0].dtype_width)


def reduce_dense(inputs: Sequence[DenseGrad]) -> DenseGrad:
    """Elementwise sum in ascending input order.

    The left-fold order is fixed: floating-point addition is non-associative
    and bitwise regression tests need a deterministic result.
    """
    if not inputs:
        raise InvariantError("reduce_dense requires at least one input")
    shape = inputs[0].shape
    for d in inputs[1:]:
        if d.shape != shape:
            raise ShapeMismatchError(f"shape mismatch: {d.shape} vs {shape}")
    acc = inputs[0].array.copy()
    for d in inputs[1:]:
        acc += d.array
    return DenseGrad(acc, dtype_width=inputs[0].dtype_width)


def materialize(g: Grad) -> DenseGrad:
    """Dense identity, or scatter-add for slices. Oracle for equivalence tests."""
    if isinstance(g, DenseGrad):
        return g
    if isinstance(g, SliceGrad):
        return convert_to_dense(g)
    raise TypeError(f"cannot materialize {g!r}")


def _check_compatible(inputs: Sequence[Grad]) -> None:
    shapes = {g.dense_shape for g in inputs}
    if len(shapes) > 1:
        raise ShapeMismatchError(f"inputs disagree on dense shape: {sorted(shapes)}")


def accumulate_legacy(inputs: Sequence[Grad]):
    """Legacy accumulation dispatch: gather as soon as any input is sparse.

    <2 inputs pass through unchanged (empty lists yield EMPTY_GRAD); all-dense
    inputs reduce; mixed or all-sparse inputs are concatenated after
    converting dense members to full-coverage slices.  The result is sparse
    whenever any input is sparse -- the assumed-sparse pathology.
    """
    if len(inputs) == 0:
        return EMPTY_GRAD
    if len(inputs) == 1:
        return inputs[0]
    _check_compatible(inputs)
    if all(isinstance(g, DenseGrad) for g in inputs):
        return reduce_dense(inputs)
    as_slices = [g if isinstance(g, SliceGrad) else dense_to_slices(g)
                 for g in inputs]
    return concat_slices(as_slices)


def accumulate_proposed(inputs: Sequence[Grad]):
    """Proposed dispatch: densify and reduce as soon as any input is dense.

    Identical to the legacy dispatch except in the mixed case, where every
    sparse input is scatter-added to dense and the list is reduced.  Only a
    pure-sparse list still gathers.
    """
    if len(inputs) == 0:
        return EMPTY_GRAD
    if len(inputs) == 1:
        return inputs[0]
    _check_compatible(inputs)
    if any(isinstance(g, DenseGrad) for g in inputs):
        return reduce_dense([materialize(g) for g in inputs])
    return concat_slices(list(inputs))


class GradBundle:
    """Ordered per-step gradient list produced by one rank.

    Each variable id maps to one or more gradient contributions sharing a
    dense shape.  A tied embedding/projection variable carries two
    contributions in the same step (the sparse lookup gradient and the dense
    projection gradient) -- the collision that decides the exchange path.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries: Iterable[tuple[str, Sequence[Grad]]] = ()):
        self._entries: dict[str, tuple[Grad, ...]] = {}
        for var, grads in entries:
            self.add(var, *grads)

    def add(self, var: str, *grads: Grad) -> None:
        if var in self._entries:
            raise InvariantError(f"duplicate variable id {var!r}")
        if not grads:
            raise InvariantError(f"variable {var!r} needs at least one gradient")
        shapes = {g.dense_shape for g in grads}
        if len(shapes) > 1:
            raise ShapeMismatchError(
                f"contributions for {var!r} disagree on dense shape: {sorted(shapes)}")
        self._entries[var] = tuple(grads)

    @property
    def var_ids(self) -> tuple[str, ...]:
        return tuple(self._entries)

    def contributions(self, var: str) -> tuple[Grad, ...]:
        return self._entries[var]

    def items(self):
        return self._entries.items()

    def __len__(self):
        return len(self._entries)

    def __contains__(self, var):
        return var in self._entries

    def __repr__(self):
        return f"GradBundle({list(self._entries)})"


def densify_pass(bundle: GradBundle, sparse_as_dense: bool) -> GradBundle:
    """Optionally replace every slice gradient with its scatter-added dense form.

    With the flag off the bundle is returned unchanged; with it on, dense
    entries are untouched and order is preserved.
    """
    if not sparse_as_dense:
        return bundle
    out = GradBundle()
    for var, grads in bundle.items():
        out.add(var, *[convert_to_dense(g) if isinstance(g, SliceGrad) else g
                       for g in grads])
    return out


def grad_rows_for_gather(g: Grad) -> int:
    """Row count a gradient contributes on the gather path (dense = full shape)."""
    if isinstance(g, SliceGrad):
        return g.num_rows
    return g.rows


def nominal_byte_size(g) -> int:
    """Payload bytes of a gradient or EMPTY_GRAD under the nominal dtype."""
    if isinstance(g, EmptyGrad):
        return 0
    return g.nominal_byte_size()
