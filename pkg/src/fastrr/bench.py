"""Simulation-study harness and runtime model.

Synthetic experiments draw Gaussian covariates, assign half the units to
treatment, and build outcomes from a random linear model plus Gaussian
noise. All randomness flows through the package's keyed generator with a
polar-method normal transform, so simulated datasets are reproducible to
the bit across platforms. Simulation streams reserve draw indices at and
above 2**63 so they never collide with pool candidate draws sharing a
seed.

The benchmark compares three execution paths that must produce identical
pools before any timing is reported: ``naive`` (one-at-a-time scalar key
regeneration and balance evaluation), ``batched`` (vectorized kernels on
a single worker), and ``parallel`` (batched plus the worker pool). The
``estimate_speedup`` cost model predicts the accelerator advantage
(r_cpu + k*M) / (r_gpu + k*M/beta) with per-draw cost k = alpha * d.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import keys as keymod
from .balance import CovariateMatrix, mahalanobis_stat, precompute_precision
from .errors import ConsistencyError, InvalidDesignError
from .generation import (
    DesignSpec,
    RandomizationPool,
    _select,
    monte_carlo_pool,
    pool_assignment_matrix,
    pools_equal,
)
from .inference import diff_in_means, randomization_pvalue

#: offset keeping simulation streams disjoint from candidate draw indices
_SIM_STREAM_BASE = 1 << 63

BENCH_PATHS = ("naive", "batched", "parallel")


@dataclass(frozen=True)
class SimConfig:
    """Shape and outcome model of one synthetic experiment."""

    n: int
    k: int
    max_draws: int = 10_000
    batch_size: int = 10_000
    tau_true: float = 1.0
    noise_sd: float = 0.5
    coef: np.ndarray | None = None
    replicates: int = 10

    def __post_init__(self):
        if self.n < 4 or self.n % 2:
            raise InvalidDesignError(f"n must be an even count >= 4, got {self.n}")
        if self.k < 1:
            raise InvalidDesignError(f"k must be positive, got {self.k}")
        if self.replicates < 1:
            raise InvalidDesignError("replicates must be at least 1")
        if self.coef is not None:
            c = np.asarray(self.coef, dtype=np.float64)
            if c.shape != (self.k,):
                raise InvalidDesignError(f"coef must have length k={self.k}")
            object.__setattr__(self, "coef", c)


@dataclass(frozen=True)
class CostModel:
    """Parameters of the batched balance-check runtime model."""

    r_cpu: float
    r_gpu: float
    alpha: float
    d: int
    beta: float
    M: int
    B: int = 1

    def __post_init__(self):
        for name in ("r_cpu", "r_gpu", "alpha", "beta", "M", "B", "d"):
            if getattr(self, name) < 0:
                raise InvalidDesignError(f"{name} must be nonnegative")
        if self.beta < 1:
            raise InvalidDesignError("beta must be at least 1")


def estimate_speedup(model: CostModel) -> float:
    """Predicted accelerated-over-reference runtime ratio."""
    k = model.alpha * model.d
    denom = model.r_gpu + k * model.M / model.beta
    if denom <= 0:
        raise InvalidDesignError("cost model denominator must be positive")
    return (model.r_cpu + k * model.M) / denom


def _stream_u64(seed: int, stream: int, start: int, count: int) -> np.ndarray:
    """Counter-form slice [start, start+count) of a simulation stream."""
    state = keymod.derive_state(keymod.AssignmentKey(seed, _SIM_STREAM_BASE + stream))
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    return keymod._mix64_u64(np.uint64(state) + idx * np.uint64(keymod.GOLDEN))


def normals_from_stream(seed: int, stream: int, count: int) -> np.ndarray:
    """Standard normals via the polar method on a keyed stream.

    Consecutive stream outputs are paired; pair j maps to two uniforms in
    (-1, 1), is rejected unless 0 < s = v1^2 + v2^2 < 1, and otherwise
    yields the two normals (v1, v2) * sqrt(-2 ln s / s). Accepted pairs
    are consumed in index order, so the result is chunking-invariant.
    """
    out = np.empty(count, dtype=np.float64)
    filled = 0
    pair_at = 0
    want_pairs = (count + 1) // 2
    while filled < count:
        take = max(64, int(1.4 * (want_pairs - filled // 2)) + 16)
        u = _stream_u64(seed, stream, 2 * pair_at, 2 * take)
        f = (u >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        v = 2.0 * f - 1.0
        v1, v2 = v[0::2], v[1::2]
        s = v1 * v1 + v2 * v2
        ok = (s > 0.0) & (s < 1.0)
        g = np.sqrt(-2.0 * np.log(s[ok]) / s[ok])
        z = np.empty(2 * int(ok.sum()), dtype=np.float64)
        z[0::2] = v1[ok] * g
        z[1::2] = v2[ok] * g
        room = min(z.shape[0], count - filled)
        out[filled : filled + room] = z[:room]
        filled += room
        pair_at += take
    return out


def simulate_data(cfg: SimConfig, seed: int = 0):
    """One synthetic dataset: covariates, treated-half assignment, outcomes.

    Streams: 0 covariates (row-major), 1 coefficients (when cfg.coef is
    None), 2 noise; the assignment comes from key (seed, 2**63 + 3).
    """
    X = normals_from_stream(seed, 0, cfg.n * cfg.k).reshape(cfg.n, cfg.k)
    coef = cfg.coef
    if coef is None:
        coef = normals_from_stream(seed, 1, cfg.k)
    noise = normals_from_stream(seed, 2, cfg.n)
    assignment = keymod.assignment_from_key(
        keymod.AssignmentKey(seed, _SIM_STREAM_BASE + 3), cfg.n, cfg.n // 2
    )
    y = X @ coef + cfg.tau_true * assignment.bits + cfg.noise_sd * noise
    return CovariateMatrix(X), assignment, y


def _bench_design(cfg: SimConfig, accept_prob: float, seed: int) -> DesignSpec:
    # ridge precision: benchmark grids routinely have k >= n
    return DesignSpec(
        n_units=cfg.n,
        n_treated=cfg.n // 2,
        accept_prob=accept_prob,
        mode="monte_carlo",
        max_draws=cfg.max_draws,
        batch_size=min(cfg.batch_size, cfg.max_draws),
        precision_mode="ridge",
        root_seed=seed,
        storage="keys",
    )


def _naive_pool(cov: CovariateMatrix, design: DesignSpec) -> RandomizationPool:
    """Reference path: per-candidate scalar regeneration and evaluation."""
    precision = precompute_precision(cov, design.precision_mode, ridge_scale=design.ridge_scale)
    stats = np.empty(design.max_draws, dtype=np.float64)
    for m in range(design.max_draws):
        a = keymod.assignment_from_key(
            keymod.AssignmentKey(design.root_seed, m), design.n_units, design.n_treated
        )
        stats[m] = mahalanobis_stat(cov, precision, a)
    accepted, threshold = _select(stats, design.accept_prob)
    return RandomizationPool(
        design=design,
        stats=stats[accepted],
        threshold_value=threshold,
        n_candidates=design.max_draws,
        accepted_indices=accepted,
        keys=np.column_stack(
            [np.full(accepted.shape[0], design.root_seed, dtype=np.uint64), accepted.astype(np.uint64)]
        ),
    )


def _naive_test(obs_w, obs_y, pool: RandomizationPool) -> float:
    mat = pool_assignment_matrix(pool)
    tau = diff_in_means(obs_w, obs_y)
    hits = sum(1 for row in mat if abs(diff_in_means(row, obs_y)) >= abs(tau))
    return hits / mat.shape[0]


def run_benchmark(
    cfg: SimConfig,
    paths=BENCH_PATHS,
    accept_prob: float = 0.01,
    seed: int = 0,
    workers: int | None = None,
) -> list[dict]:
    """Time generation and testing per path, after verifying path equality.

    Returns one row per (path, phase, replicate):
    ``{path, phase, n, k, max_draws, replicate, seconds}``.
    """
    paths = tuple(paths)
    if not paths:
        raise InvalidDesignError("at least one benchmark path is required")
    for p in paths:
        if p not in BENCH_PATHS:
            raise InvalidDesignError(f"unknown benchmark path {p!r}")
    rows = []
    for rep in range(cfg.replicates):
        rep_seed = (seed + rep) & keymod.MASK64
        cov, _, y = simulate_data(cfg, rep_seed)
        design = _bench_design(cfg, accept_prob, rep_seed)
        pools: dict[str, RandomizationPool] = {}
        p_values: dict[str, float] = {}
        timings = {}
        for path in paths:
            t0 = time.perf_counter()
            if path == "naive":
                pool = _naive_pool(cov, design)
            elif path == "batched":
                pool = monte_carlo_pool(cov, design, workers=1)
            else:
                pool = monte_carlo_pool(cov, design, workers=workers)
            t1 = time.perf_counter()
            obs_w = pool_assignment_matrix(pool)[0]
            if path == "naive":
                p_val = _naive_test(obs_w, y, pool)
            else:
                p_val = randomization_pvalue(obs_w, y, pool).p_value
            t2 = time.perf_counter()
            pools[path] = pool
            p_values[path] = p_val
            timings[path] = (t1 - t0, t2 - t1)
        reference = pools[paths[0]]
        for path in paths[1:]:
            if not pools_equal(reference, pools[path]):
                raise ConsistencyError(
                    f"benchmark paths {paths[0]!r} and {path!r} produced different pools"
                )
            if p_values[path] != p_values[paths[0]]:
                raise ConsistencyError(
                    f"benchmark paths {paths[0]!r} and {path!r} produced different p-values"
                )
        for path in paths:
            gen_s, test_s = timings[path]
            base = {
                "path": path,
                "n": cfg.n,
                "k": cfg.k,
                "max_draws": cfg.max_draws,
                "replicate": rep,
            }
            rows.append({**base, "phase": "generation", "seconds": gen_s})
            rows.append({**base, "phase": "testing", "seconds": test_s})
    return rows


def summarize_benchmark(rows: list[dict]) -> dict:
    """Median seconds per (path, phase)."""
    groups: dict[tuple[str, str], list[float]] = {}
    for row in rows:
        groups.setdefault((row["path"], row["phase"]), []).append(row["seconds"])
    out: dict[str, dict[str, float]] = {}
    for (path, phase), vals in sorted(groups.items()):
        out.setdefault(path, {})[phase] = float(np.median(vals))
    return out
