"""Sparse attention with cached softmax-denominator ratios and residuals.

Sparse attention drops keys from each query's softmax, which shrinks the
denominator and inflates the surviving weights. This package rescales the
sparse softmax by a denominator ratio measured at an earlier full-attention
step and adds back the cached contribution of the dropped keys.
"""

from .attention import (
    AttentionInputs,
    AttentionOutput,
    DenominatorStats,
    compute_denominator_ratio,
    compute_residual,
    full_attention,
    post_softmax_masked,
    rettention_attention,
    reshape_attention,
    sparse_attention,
)
from .errors import (
    CacheMissError,
    ConfigError,
    InvalidMaskError,
    InvariantError,
    NumericError,
    ParameterError,
    RettentionError,
    ShapeError,
)
from .masks import (
    SparseMask,
    VideoLayout,
    block_diagonal_mask,
    framewise_window_mask,
    full_mask,
    row_index_sets,
    sliding_window_mask,
    sparsity,
    window_for_sparsity,
)
from .schedule import (
    AttentionCache,
    DenoisingSchedule,
    StepKind,
    advance_cache,
    capture_cache,
    classify_step,
)
from .simulator import (
    Backend,
    FlopCount,
    MetricsReport,
    TrajectoryConfig,
    flop_count,
    generate_trajectory,
    run_experiment,
    run_seeds,
    trace_rho,
)
from .tensor import RowStats, matmul_av, row_softmax, scaled_qk

__version__ = "0.1.0"
