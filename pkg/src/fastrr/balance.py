"""Covariate balance statistics over treatment assignments.

The balance criterion is the scaled Mahalanobis distance between treated
and control covariate means,

    M(W) = (n_t * n_c / n) * delta' P delta,
    delta = mean(X | W=1) - mean(X | W=0),

where ``P`` is the inverse (exact, ridge-regularized, or diagonal) of the
sample covariance of ``X``. Batched evaluation must agree with the scalar
path bit for bit regardless of batch partitioning or thread schedule, so
the assignment-dependent matrix product is carried out in exact integer
arithmetic: covariates are projected through a factor of ``P``, centered,
and scaled by a power of two to integer-valued float64 such that every
partial sum in the 0/1-matrix product stays below 2**53 and is therefore
exact. The scaling is undone by an exact power-of-two division, and the
quantization perturbs statistics at relative level ~1e-10, far below the
contracts of this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidDesignError, SingularCovarianceError
from .keys import Assignment

#: rows per internal evaluation chunk for very large public batches
_STAT_CHUNK = 8192


@dataclass(frozen=True)
class CovariateMatrix:
    """Pre-treatment covariates, one row per experimental unit."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, order="C", copy=True)
        if v.ndim != 2:
            raise DimensionError(f"covariates must be a 2-D matrix, got ndim={v.ndim}")
        if v.shape[0] < 2 or v.shape[1] < 1:
            raise DimensionError(
                f"covariates need at least 2 rows and 1 column, got shape {v.shape}"
            )
        if not np.isfinite(v).all():
            raise InvalidDesignError("covariates contain non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_units(self) -> int:
        return self.values.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.values.shape[1]


def as_covariates(X) -> CovariateMatrix:
    return X if isinstance(X, CovariateMatrix) else CovariateMatrix(np.asarray(X))


class BalanceKernel:
    """Precomputed, bit-stable evaluator of balance statistics.

    Holds the quantized projected covariates. ``stats`` is a pure
    elementwise/exact-integer pipeline, so its output for a given
    assignment row never depends on which other rows share the call.
    """

    def __init__(self, cov: CovariateMatrix, inverse: np.ndarray):
        X = cov.values
        n = X.shape[0]
        Xc = X - X.mean(axis=0)
        Z = Xc @ _psd_factor(inverse)
        maxabs = float(np.max(np.abs(Z))) if Z.size else 0.0
        # largest exponent keeping every partial sum of <= n terms exact
        cap = 51 - max(1, (n - 1).bit_length())
        if maxabs > 0.0 and math.isfinite(maxabs):
            exp = cap - math.frexp(maxabs)[1]
        else:
            exp = 0
        scale = math.ldexp(1.0, min(exp, 1023))
        self.n_units = n
        self._zq = np.rint(Z * scale)
        self._colsum = self._zq.sum(axis=0)
        self._inv_scale_sq = math.ldexp(1.0, -2 * min(exp, 1023))

    def stats(self, w_matrix: np.ndarray, n_treated: int) -> np.ndarray:
        t = n_treated
        nc = self.n_units - t
        g = 1.0 / t + 1.0 / nc
        cc = self._colsum * (1.0 / nc)
        const = (t * nc / self.n_units) * self._inv_scale_sq
        out = np.empty(w_matrix.shape[0], dtype=np.float64)
        for lo in range(0, w_matrix.shape[0], _STAT_CHUNK):
            chunk = w_matrix[lo : lo + _STAT_CHUNK]
            delta = (chunk.astype(np.float64) @ self._zq) * g
            delta -= cc
            out[lo : lo + _STAT_CHUNK] = (delta * delta).sum(axis=1) * const
        return out


@dataclass
class BalancePrecision:
    """A d x d precision matrix used in the balance quadratic form."""

    inverse: np.ndarray
    mode: str
    ridge_lambda: float = 0.0
    _kernel: BalanceKernel | None = field(default=None, repr=False, compare=False)
    _source: CovariateMatrix | None = field(default=None, repr=False, compare=False)


def _psd_factor(P: np.ndarray) -> np.ndarray:
    """Factor F with F F' = P (PSD), via Cholesky or clipped eigenvalues."""
    Psym = (P + P.T) / 2.0
    try:
        return np.linalg.cholesky(Psym)
    except np.linalg.LinAlgError:
        lam, vec = np.linalg.eigh(Psym)
        return vec * np.sqrt(np.clip(lam, 0.0, None))[None, :]


def sample_covariance(X) -> np.ndarray:
    """d x d sample covariance of the covariate matrix (n-1 divisor)."""
    v = as_covariates(X).values
    Xc = v - v.mean(axis=0)
    return (Xc.T @ Xc) / (v.shape[0] - 1)


def precompute_precision(X, mode: str = "exact", ridge_scale: float = 0.01) -> BalancePrecision:
    """Build the precision matrix for balance evaluation.

    ``exact`` inverts the sample covariance S and fails loudly when S is
    singular; ``ridge`` inverts S + lambda*I with
    lambda = ridge_scale * mean(diag(S)); ``diagonal`` uses
    1 / max(S_jj, eps) with eps = 1e-12 * max(max(diag(S)), 1).
    """
    cov = as_covariates(X)
    if mode not in ("exact", "ridge", "diagonal"):
        raise InvalidDesignError(f"unknown precision mode {mode!r}")
    S = sample_covariance(cov)
    d = S.shape[0]
    dvar = np.diag(S).copy()
    ridge_lambda = 0.0
    if mode == "exact":
        if d >= cov.n_units:
            raise SingularCovarianceError(
                f"sample covariance is singular: {d} covariates with only "
                f"{cov.n_units} units (rank at most {cov.n_units - 1}); use ridge"
            )
        zero_cols = np.nonzero(dvar <= 0.0)[0]
        if zero_cols.size:
            raise SingularCovarianceError(
                f"sample covariance is singular: column {int(zero_cols[0])} has zero "
                "variance (constant covariate); use ridge"
            )
        try:
            np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise SingularCovarianceError(
                "sample covariance is singular (collinear covariates); use ridge"
            ) from None
        inverse = np.linalg.inv(S)
    elif mode == "ridge":
        ridge_lambda = ridge_scale * float(dvar.mean())
        if ridge_lambda <= 0.0:
            raise SingularCovarianceError(
                "ridge regularization degenerate: all covariates are constant"
            )
        inverse = np.linalg.inv(S + ridge_lambda * np.eye(d))
    else:
        eps = 1e-12 * max(float(dvar.max()), 1.0)
        inverse = np.diag(1.0 / np.maximum(dvar, eps))
    inverse = np.ascontiguousarray((inverse + inverse.T) / 2.0)
    inverse.setflags(write=False)
    prec = BalancePrecision(inverse=inverse, mode=mode, ridge_lambda=ridge_lambda)
    prec._kernel = BalanceKernel(cov, inverse)
    prec._source = cov
    return prec


def _kernel_for(cov: CovariateMatrix, precision: BalancePrecision) -> BalanceKernel:
    if precision._kernel is not None and precision._source is cov:
        return precision._kernel
    return BalanceKernel(cov, precision.inverse)


def _as_bits_matrix(batch) -> np.ndarray:
    if isinstance(batch, Assignment):
        return batch.bits.reshape(1, -1)
    if isinstance(batch, np.ndarray):
        mat = batch if batch.ndim == 2 else batch.reshape(1, -1)
        return np.ascontiguousarray(mat, dtype=np.int8)
    rows = [a.bits if isinstance(a, Assignment) else np.asarray(a, dtype=np.int8) for a in batch]
    if not rows:
        return np.empty((0, 0), dtype=np.int8)
    return np.ascontiguousarray(np.vstack(rows), dtype=np.int8)


def _validate_batch(mat: np.ndarray, n_units: int) -> np.ndarray:
    if mat.shape[0] and mat.shape[1] != n_units:
        raise DimensionError(
            f"assignment length {mat.shape[1]} does not match n_units {n_units}"
        )
    if mat.shape[0] and not np.isin(mat, (0, 1)).all():
        raise InvalidDesignError("assignments must contain only 0 and 1 entries")
    sums = mat.sum(axis=1, dtype=np.int64)
    if mat.shape[0]:
        lo, hi = int(sums.min()), int(sums.max())
        if lo <= 0 or hi >= n_units:
            raise InvalidDesignError(
                "every assignment must treat at least one and at most n_units-1 units"
            )
    return sums


def mahalanobis_stat(X, precision: BalancePrecision, W) -> float:
    """Balance statistic for one assignment: (n_t n_c / n) delta' P delta."""
    cov = as_covariates(X)
    mat = _as_bits_matrix(W)
    if mat.shape[0] != 1:
        raise DimensionError("mahalanobis_stat expects a single assignment")
    sums = _validate_batch(mat, cov.n_units)
    kernel = _kernel_for(cov, precision)
    return float(kernel.stats(mat, int(sums[0]))[0])


def batch_balance(X, precision: BalancePrecision, batch) -> np.ndarray:
    """Balance statistics for a batch of assignments.

    Element ``i`` equals ``mahalanobis_stat(X, precision, batch[i])``
    exactly; assignments with differing treated counts are grouped and
    evaluated per count.
    """
    cov = as_covariates(X)
    mat = _as_bits_matrix(batch)
    if mat.shape[0] == 0:
        return np.empty(0, dtype=np.float64)
    sums = _validate_batch(mat, cov.n_units)
    kernel = _kernel_for(cov, precision)
    out = np.empty(mat.shape[0], dtype=np.float64)
    for t in np.unique(sums):
        idx = np.nonzero(sums == t)[0]
        out[idx] = kernel.stats(mat[idx], int(t))
    return out
