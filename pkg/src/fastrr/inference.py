"""Randomization tests over an accepted pool.

The p-value for the sharp null of no treatment effect is the share of
pool assignments whose statistic is at least as extreme (in absolute
value, ties inclusive) as the observed one:

    p = (1/M) * sum_m 1{ |T(W_m, Y)| >= |T(W_obs, Y)| }

Fiducial intervals invert this test under a constant additive effect:
tau belongs to the interval iff the test applied to Y - tau*W_obs does
not reject at level alpha. For the difference-in-means statistic the
adjusted statistics are linear in tau, T(W, Y - tau*W_obs) =
T(W, Y) - tau * T(W, W_obs), so the inversion reuses two precomputed
vectors and every p(tau) evaluation is O(M).

Statistics for the pool and for the observed assignment are evaluated
through one fixed-order reduction so that exact ties (e.g. the observed
assignment sitting in the pool) compare exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    DimensionError,
    EmptyIntervalError,
    EmptyPoolError,
    InvalidDesignError,
    UnsupportedStatisticError,
)
from .generation import DesignSpec, RandomizationPool, generate_pool, pool_assignment_matrix
from .keys import Assignment

_ROW_CHUNK = 4096


@dataclass
class TestResult:
    """Outcome of a randomization test."""

    p_value: float
    tau_obs: float
    fi: tuple[float, float] | None
    stat_distribution: np.ndarray
    alpha: float | None = None
    obs_in_pool: bool = True

    @property
    def n_accepted(self) -> int:
        return int(self.stat_distribution.shape[0])


def _as_vector(x, name: str) -> np.ndarray:
    v = np.asarray(x.bits if isinstance(x, Assignment) else x)
    if v.ndim != 1:
        raise DimensionError(f"{name} must be one-dimensional, got shape {v.shape}")
    return v


def _check_lengths(w: np.ndarray, y: np.ndarray):
    if w.shape[0] != y.shape[0]:
        raise DimensionError(
            f"assignment length {w.shape[0]} does not match outcome length {y.shape[0]}"
        )


def diff_in_means(W, Y) -> float:
    """mean(Y | W=1) - mean(Y | W=0)."""
    w = _as_vector(W, "assignment")
    y = np.asarray(Y, dtype=np.float64)
    _check_lengths(w, y)
    t = int(w.sum())
    if not (0 < t < w.shape[0]):
        raise InvalidDesignError("assignment must treat at least one and leave one control")
    return float(y[w == 1].mean() - y[w == 0].mean())


def _dim_rows(w_matrix: np.ndarray, y: np.ndarray, n_treated: int) -> np.ndarray:
    """Difference-in-means per assignment row, fixed reduction order.

    Each group sum is a pairwise reduction over the n axis of the masked
    outcome row, so a given assignment's value is identical whether it is
    evaluated alone or inside any larger matrix. Computing the control
    sum explicitly (rather than as total - treated) makes relabeling
    W -> 1-W negate the statistic bitwise, so complement assignments are
    exact ties.
    """
    n = y.shape[0]
    t = n_treated
    nc = n - t
    out = np.empty(w_matrix.shape[0], dtype=np.float64)
    for lo in range(0, w_matrix.shape[0], _ROW_CHUNK):
        chunk = w_matrix[lo : lo + _ROW_CHUNK].astype(np.float64)
        s_t = (chunk * y).sum(axis=1)
        s_c = ((1.0 - chunk) * y).sum(axis=1)
        out[lo : lo + _ROW_CHUNK] = s_t * (1.0 / t) - s_c * (1.0 / nc)
    return out


def _pool_matrix_and_counts(pool: RandomizationPool):
    if pool.n_accepted == 0:
        raise EmptyPoolError("pool has no accepted randomizations")
    mat = pool_assignment_matrix(pool)
    return mat, pool.design.n_treated


def _resolve_statistic(statistic):
    if statistic is None or statistic is diff_in_means or statistic == "diff_in_means":
        return None
    if callable(statistic):
        return statistic
    raise UnsupportedStatisticError(f"unknown statistic {statistic!r}")


def _stats_for(mat: np.ndarray, obs_w: np.ndarray, y: np.ndarray, t: int, custom):
    """(pool statistics, observed statistic) under one evaluation path."""
    if custom is None:
        dist = _dim_rows(mat, y, t)
        tau = float(_dim_rows(obs_w.reshape(1, -1), y, int(obs_w.sum()))[0])
        return dist, tau
    dist = np.array([custom(row, y) for row in mat], dtype=np.float64)
    return dist, float(custom(obs_w, y))


def randomization_pvalue(obs_w, obs_y, pool: RandomizationPool, statistic=None) -> TestResult:
    """Exact two-sided randomization test against the accepted pool."""
    w = _as_vector(obs_w, "observed assignment").astype(np.int8)
    y = np.asarray(obs_y, dtype=np.float64)
    _check_lengths(w, y)
    if not np.isfinite(y).all():
        raise InvalidDesignError("outcomes contain non-finite entries")
    if w.shape[0] != pool.design.n_units:
        raise DimensionError(
            f"observed assignment has {w.shape[0]} units but pool was built for "
            f"{pool.design.n_units}"
        )
    custom = _resolve_statistic(statistic)
    mat, t = _pool_matrix_and_counts(pool)
    dist, tau_obs = _stats_for(mat, w, y, t, custom)
    in_pool = bool((mat == w).all(axis=1).any())
    if not in_pool:
        warnings.warn(
            "observed assignment is not a member of the accepted pool; "
            "the p-value may fall below 1/n_accepted",
            stacklevel=2,
        )
    p = float(np.count_nonzero(np.abs(dist) >= abs(tau_obs))) / dist.shape[0]
    return TestResult(
        p_value=p,
        tau_obs=tau_obs,
        fi=None,
        stat_distribution=dist,
        alpha=None,
        obs_in_pool=in_pool,
    )


def _pvalue_curve(pool_mat, obs_w, y, t):
    """Closure evaluating p(tau) for the additive-effect inversion.

    T(W, Y - tau*W_obs) = T(W, Y) - tau * T(W, W_obs) for the
    difference-in-means statistic; the observed side is computed through
    the same per-row reduction so exact ties compare exactly.
    """
    w_as_y = obs_w.astype(np.float64)
    a = _dim_rows(pool_mat, y, t)
    b = _dim_rows(pool_mat, w_as_y, t)
    t_obs = int(obs_w.sum())
    tau_obs = float(_dim_rows(obs_w.reshape(1, -1), y, t_obs)[0])
    b_obs = float(_dim_rows(obs_w.reshape(1, -1), w_as_y, t_obs)[0])
    m = a.shape[0]

    def p_at(tau: float) -> float:
        return float(
            np.count_nonzero(np.abs(a - tau * b) >= abs(tau_obs - tau * b_obs))
        ) / m

    return p_at, tau_obs, a


def fiducial_interval(
    obs_w,
    obs_y,
    pool: RandomizationPool,
    alpha: float = 0.05,
    statistic=None,
) -> tuple[float, float]:
    """Interval of additive effects not rejected at level ``alpha``.

    A coarse grid over tau_obs +/- 10 sd of the pool statistics brackets
    the acceptance region of the step function p(tau); each boundary is
    then refined by bisection to 1e-6 * max(1, |tau_obs|).
    """
    if _resolve_statistic(statistic) is not None:
        raise UnsupportedStatisticError(
            "fiducial intervals support only the difference-in-means statistic"
        )
    if not (0.0 < alpha < 1.0):
        raise InvalidDesignError(f"alpha must lie in (0, 1), got {alpha}")
    w = _as_vector(obs_w, "observed assignment").astype(np.int8)
    y = np.asarray(obs_y, dtype=np.float64)
    _check_lengths(w, y)
    mat, t = _pool_matrix_and_counts(pool)
    p_at, tau_obs, dist = _pvalue_curve(mat, w, y, t)

    half = 10.0 * float(np.std(dist))
    if not np.isfinite(half) or half == 0.0:
        half = max(1.0, abs(tau_obs))
    lo_grid, hi_grid = tau_obs - half, tau_obs + half
    for _ in range(64):
        grid = np.linspace(lo_grid, hi_grid, 201)
        pvals = np.array([p_at(g) for g in grid])
        accept = pvals >= alpha
        if not accept.any():
            raise EmptyIntervalError(
                f"no effect size reaches p >= {alpha}; maximum p on the grid is "
                f"{float(pvals.max())}",
                max_p=float(pvals.max()),
            )
        if accept[0] or accept[-1]:
            width = hi_grid - lo_grid
            lo_grid, hi_grid = lo_grid - width, hi_grid + width
            continue
        break
    else:
        raise EmptyIntervalError(
            "acceptance region did not close under grid expansion; alpha may be "
            "below the 1/n_accepted resolution of the pool"
        )

    tol = 1e-6 * max(1.0, abs(tau_obs))
    first = int(np.argmax(accept))
    last = len(accept) - 1 - int(np.argmax(accept[::-1]))

    def refine(outside: float, inside: float) -> float:
        while abs(inside - outside) > tol:
            mid = 0.5 * (inside + outside)
            if p_at(mid) >= alpha:
                inside = mid
            else:
                outside = mid
        return inside

    lower = refine(grid[first - 1], grid[first])
    upper = refine(grid[last + 1], grid[last])
    return (float(lower), float(upper))


def randomization_test(
    obs_w,
    obs_y,
    pool: RandomizationPool,
    statistic=None,
    find_fi: bool = False,
    alpha: float = 0.05,
) -> TestResult:
    """p-value plus optional fiducial interval in one call."""
    result = randomization_pvalue(obs_w, obs_y, pool, statistic=statistic)
    if find_fi:
        result.fi = fiducial_interval(obs_w, obs_y, pool, alpha=alpha, statistic=statistic)
        result.alpha = alpha
    return result


def _observed_from_rule(rule, pool: RandomizationPool) -> np.ndarray:
    if isinstance(rule, str):
        if rule != "first":
            raise InvalidDesignError(f"unknown observed-assignment rule {rule!r}")
        return pool_assignment_matrix(pool)[0]
    if callable(rule):
        return np.asarray(rule(pool), dtype=np.int8)
    return _as_vector(rule, "observed assignment").astype(np.int8)


def threshold_sweep(
    X,
    base_design: DesignSpec,
    probs,
    obs_y,
    obs_w_rule="first",
    find_fi: bool = False,
    alpha: float = 0.05,
    workers: int | None = None,
) -> list[dict]:
    """Rebuild the pool at each acceptance probability and rerun the test.

    All rows share the base design's seed and draw count so they are
    comparable; a failing row is recorded with its error code and the
    sweep continues.
    """
    rows = []
    for prob in probs:
        row = {"accept_prob": float(prob), "p_value": None, "n_accepted": None, "status": "ok"}
        if find_fi:
            row["fi_width"] = None
        try:
            design = replace(base_design, accept_prob=float(prob))
            pool = generate_pool(X, design, workers=workers)
            obs_w = _observed_from_rule(obs_w_rule, pool)
            res = randomization_test(obs_w, obs_y, pool, find_fi=find_fi, alpha=alpha)
            row["p_value"] = res.p_value
            row["n_accepted"] = res.n_accepted
            if find_fi and res.fi is not None:
                row["fi_width"] = res.fi[1] - res.fi[0]
        except Exception as exc:  # row-level isolation, sweep continues
            row["status"] = f"failed: {exc}"
        rows.append(row)
    return rows
