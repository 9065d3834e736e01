"""Fast rerandomization: balanced assignment pools and exact randomization inference."""

from .balance import (
    BalancePrecision,
    CovariateMatrix,
    batch_balance,
    mahalanobis_stat,
    precompute_precision,
    sample_covariance,
)
from .bench import (
    CostModel,
    SimConfig,
    estimate_speedup,
    normals_from_stream,
    run_benchmark,
    simulate_data,
    summarize_benchmark,
)
from .errors import FastrrError
from .generation import (
    DesignSpec,
    RandomizationPool,
    enumerate_exact,
    generate_pool,
    monte_carlo_pool,
    pool_assignment_matrix,
    pool_summary,
    read_pool,
    regenerate_assignments,
    write_pool,
)
from .inference import (
    TestResult,
    diff_in_means,
    fiducial_interval,
    randomization_pvalue,
    randomization_test,
    threshold_sweep,
)
from .keys import (
    Assignment,
    AssignmentKey,
    assignment_from_key,
    batch_assignments,
    derive_state,
    memory_improvement_factor,
)

__version__ = "0.1.0"

__all__ = [
    "Assignment",
    "AssignmentKey",
    "BalancePrecision",
    "CostModel",
    "CovariateMatrix",
    "DesignSpec",
    "FastrrError",
    "RandomizationPool",
    "SimConfig",
    "TestResult",
    "assignment_from_key",
    "batch_assignments",
    "batch_balance",
    "derive_state",
    "diff_in_means",
    "enumerate_exact",
    "estimate_speedup",
    "fiducial_interval",
    "generate_pool",
    "mahalanobis_stat",
    "memory_improvement_factor",
    "monte_carlo_pool",
    "normals_from_stream",
    "pool_assignment_matrix",
    "pool_summary",
    "precompute_precision",
    "randomization_pvalue",
    "randomization_test",
    "read_pool",
    "regenerate_assignments",
    "run_benchmark",
    "sample_covariance",
    "simulate_data",
    "summarize_benchmark",
    "threshold_sweep",
    "write_pool",
]
