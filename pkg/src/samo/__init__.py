"""Sparsity-aware compressed model states for mixed-precision training, plus
analytical memory and parallel-training cost models."""

from .dense import DimensionError, cast, matmul
from .parallel import (
    BatchTimeBreakdown,
    ClusterSpec,
    InfeasibleError,
    ParallelConfig,
    WorkloadSpec,
    allreduce_time,
    batch_breakdown,
    bubble_time,
    min_feasible_g_inter,
    send_time,
    simulate_pipeline,
)
from .pruner import PrunedIndexSet, linearize, magnitude_prune
from .store import (
    CompressedState,
    LayerState,
    MemoryReport,
    ModelState,
    compress,
    expand,
    measured_bytes,
    memory_model,
)
from .training import (
    ModelSpec,
    OptimizerConfig,
    backward,
    forward,
    optimizer_step,
    train,
    train_reference_masked,
)

__version__ = "0.1.0"
