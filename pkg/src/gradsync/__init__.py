"""gradsync: a desk-scale simulator of data-parallel gradient exchange.

Reproduces the sparse-gather vs dense-reduce accumulation trade-off of
tied-embedding models: indexed-slice gradients that travel by concatenation
grow with the worker count, while densified gradients travel by ring
allreduce at a fixed size.  Includes a virtual-clock cost model, Chrome
trace emission, and a weak/strong scaling benchmark harness.
"""

__version__ = "0.1.0"

from .grads import (
    DenseGrad,
    SliceGrad,
    EmptyGrad,
    EMPTY_GRAD,
    GradBundle,
    InvariantError,
    ShapeMismatchError,
    accumulate_legacy,
    accumulate_proposed,
    concat_slices,
    convert_to_dense,
    dense_to_slices,
    densify_pass,
    materialize,
    reduce_dense,
)
from .collectives import (
    CollectiveAbort,
    FusionConfig,
    RankCtx,
    Strategy,
    World,
    allgather_slices,
    allreduce_ring,
    broadcast,
    exchange_bundle,
)
from .costmodel import (
    CostModel,
    MemoryReport,
    Phase,
    TraceEvent,
    build_memory_report,
    emit_trace,
    parse_trace,
    predict_gather_bytes,
    predict_reduce_bytes,
)
from .workload import (
    TiedToyModel,
    WorkloadSpec,
    gen_bundle,
    toy_forward_backward,
    train_steps,
)
