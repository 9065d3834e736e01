"""Rerandomization pool construction.

Candidates are either all C(n, t) assignments (exact enumeration, in
lexicographic order of treated-index sets) or ``max_draws`` Monte Carlo
draws addressed by keys. Generation is two-pass: pass 1 walks the
candidates in batches of ``batch_size``, keeping only one batch of
explicit vectors alive at a time plus the full statistic array; pass 2
selects the best-balanced ``max(1, floor(accept_prob * n_candidates))``
candidates (ties broken by draw order) and regenerates their vectors if
explicit storage or a file was requested.

Because assignments are pure functions of their keys and statistics are
evaluated in exact integer arithmetic, pool contents are identical for
every batch size and worker count.

Pool file layout (CSV, LF newlines)::

    # fastrr-pool v1
    # design {...}
    key_seed,key_draw,stat              (storage=keys)
    stat,w_1,...,w_n                    (storage=full)
    key_seed,key_draw,stat,w_1,...,w_n  (storage=both)

The design JSON records the statistical identity of the pool (units,
treated count, acceptance probability, mode, draw count, precision mode,
seed, storage, realized threshold, candidate count). Memory knobs such as
batch size are deliberately excluded so that files are byte-comparable
across execution schedules.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import keys as keymod
from .balance import BalanceKernel, as_covariates, precompute_precision, _kernel_for
from .errors import (
    EmptyPoolError,
    EnumerationTooLargeError,
    InvalidDesignError,
    PoolFormatError,
    StorageCapError,
)

POOL_MAGIC = "# fastrr-pool v1"

#: default cap on exact enumeration, in candidates
DEFAULT_ENUMERATION_CAP = 10**8

#: default cap on materialized explicit assignments, in bytes
DEFAULT_FULL_STORAGE_CAP = 2 * 1024**3


@dataclass(frozen=True)
class DesignSpec:
    """Parameters identifying one rerandomization design."""

    n_units: int
    n_treated: int
    accept_prob: float = 0.01
    mode: str = "monte_carlo"
    max_draws: int = 100_000
    batch_size: int = 10_000
    precision_mode: str = "exact"
    ridge_scale: float = 0.01
    root_seed: int = 0
    storage: str = "keys"
    enumeration_cap: int = DEFAULT_ENUMERATION_CAP
    full_storage_cap: int = DEFAULT_FULL_STORAGE_CAP

    def __post_init__(self):
        keymod._check_design(self.n_units, self.n_treated)
        if not (0.0 < self.accept_prob <= 1.0):
            raise InvalidDesignError(
                f"accept_prob must lie in (0, 1], got {self.accept_prob}"
            )
        if self.mode not in ("exact", "monte_carlo"):
            raise InvalidDesignError(f"unknown generation mode {self.mode!r}")
        if self.precision_mode not in ("exact", "ridge", "diagonal"):
            raise InvalidDesignError(f"unknown precision mode {self.precision_mode!r}")
        if self.storage not in ("keys", "full", "both"):
            raise InvalidDesignError(f"unknown storage mode {self.storage!r}")
        if self.ridge_scale <= 0.0:
            raise InvalidDesignError(f"ridge_scale must be positive, got {self.ridge_scale}")
        if not (0 <= self.root_seed <= keymod.MASK64):
            raise InvalidDesignError("root_seed must be an unsigned 64-bit integer")
        if self.mode == "monte_carlo":
            if self.max_draws < 1:
                raise InvalidDesignError("max_draws must be at least 1 for monte_carlo")
            if not (1 <= self.batch_size <= self.max_draws):
                raise InvalidDesignError(
                    f"batch_size must lie in [1, max_draws], got {self.batch_size}"
                )
        else:
            if self.batch_size < 1:
                raise InvalidDesignError("batch_size must be at least 1")

    def n_exact_candidates(self) -> int:
        count = math.comb(self.n_units, self.n_treated)
        if count > keymod.MASK64:
            raise EnumerationTooLargeError(
                f"C({self.n_units}, {self.n_treated}) exceeds a 64-bit count; use monte_carlo"
            )
        return count

    def to_json_dict(self) -> dict:
        return {
            "n_units": self.n_units,
            "n_treated": self.n_treated,
            "accept_prob": self.accept_prob,
            "mode": self.mode,
            "max_draws": self.max_draws,
            "precision_mode": self.precision_mode,
            "ridge_scale": self.ridge_scale,
            "root_seed": self.root_seed,
            "storage": self.storage,
        }


@dataclass
class RandomizationPool:
    """Accepted randomizations with their balance statistics."""

    design: DesignSpec
    stats: np.ndarray
    threshold_value: float
    n_candidates: int
    accepted_indices: np.ndarray = field(default=None)
    keys: np.ndarray | None = None
    assignments: np.ndarray | None = None

    @property
    def n_accepted(self) -> int:
        return int(self.stats.shape[0])

    def key_at(self, i: int) -> keymod.AssignmentKey:
        if self.keys is None:
            raise InvalidDesignError("pool has no keys (exact-mode or full-only pool)")
        return keymod.AssignmentKey(int(self.keys[i, 0]), int(self.keys[i, 1]))

    def storage_words(self) -> int:
        """Candidate-storage footprint in 64-bit words (stat + key/vector)."""
        per_row = 1
        if self.keys is not None:
            per_row += keymod.KEY_WORDS
        if self.assignments is not None:
            per_row += self.design.n_units
        return self.n_accepted * per_row


def _accepted_count(accept_prob: float, n_candidates: int) -> int:
    return max(1, math.floor(accept_prob * n_candidates))


def _select(stats: np.ndarray, accept_prob: float):
    """Indices of the accepted candidates (ascending), plus the threshold."""
    k = _accepted_count(accept_prob, stats.shape[0])
    order = np.argsort(stats, kind="stable")
    accepted = np.sort(order[:k])
    threshold = float(stats[order[k - 1]])
    return accepted, threshold


def _batch_ranges(total: int, batch_size: int):
    return [(lo, min(lo + batch_size, total)) for lo in range(0, total, batch_size)]


def _resolve_workers(workers: int | None) -> int:
    if workers is None:
        env = os.environ.get("FASTRR_THREADS", "")
        workers = int(env) if env else (os.cpu_count() or 1)
    if workers < 1:
        raise InvalidDesignError(f"worker count must be at least 1, got {workers}")
    return workers


def _pass1_stats(design: DesignSpec, kernel: BalanceKernel, workers: int) -> np.ndarray:
    """Evaluate balance for every Monte Carlo draw, one batch at a time."""
    stats = np.empty(design.max_draws, dtype=np.float64)

    def run(lo: int, hi: int):
        w = keymod.batch_assignments(
            design.root_seed, np.arange(lo, hi, dtype=np.uint64), design.n_units, design.n_treated
        )
        stats[lo:hi] = kernel.stats(w, design.n_treated)

    ranges = _batch_ranges(design.max_draws, design.batch_size)
    if workers == 1 or len(ranges) == 1:
        for lo, hi in ranges:
            run(lo, hi)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run, lo, hi) for lo, hi in ranges]
            for f in futures:
                f.result()
    return stats


def _check_full_cap(design: DesignSpec, n_rows: int):
    if n_rows * design.n_units > design.full_storage_cap:
        raise StorageCapError(
            f"materializing {n_rows} x {design.n_units} assignments exceeds the "
            f"{design.full_storage_cap}-byte cap; use storage='keys' or stream with out_path"
        )


def monte_carlo_pool(X, design: DesignSpec, workers: int | None = None, out_path=None) -> RandomizationPool:
    """Build an accepted pool from batched Monte Carlo draws.

    Pass 1 never holds more than one batch of explicit vectors; pass 2
    regenerates accepted assignments when ``storage`` asks for them, or
    streams rows to ``out_path`` without materializing the full matrix.
    """
    if design.mode != "monte_carlo":
        raise InvalidDesignError("monte_carlo_pool requires design.mode == 'monte_carlo'")
    cov = as_covariates(X)
    if cov.n_units != design.n_units:
        raise InvalidDesignError(
            f"covariates have {cov.n_units} rows but design.n_units is {design.n_units}"
        )
    precision = precompute_precision(cov, design.precision_mode, ridge_scale=design.ridge_scale)
    kernel = _kernel_for(cov, precision)
    workers = _resolve_workers(workers)

    all_stats = _pass1_stats(design, kernel, workers)
    accepted, threshold = _select(all_stats, design.accept_prob)

    pool = RandomizationPool(
        design=design,
        stats=all_stats[accepted],
        threshold_value=threshold,
        n_candidates=design.max_draws,
        accepted_indices=accepted,
        keys=np.column_stack(
            [np.full(accepted.shape[0], design.root_seed, dtype=np.uint64), accepted.astype(np.uint64)]
        ),
    )
    want_full = design.storage in ("full", "both")
    if out_path is not None:
        _write_pool_file(pool, out_path, _regen_batches(pool))
    elif want_full:
        _check_full_cap(design, pool.n_accepted)
        pool.assignments = regenerate_assignments(pool)
    if design.storage == "full":
        pool.keys = None
    return pool


def _exact_batches(design: DesignSpec):
    """Yield (ordinal_offset, index_matrix) batches in lexicographic order."""
    combos = itertools.combinations(range(design.n_units), design.n_treated)
    offset = 0
    while True:
        chunk = list(itertools.islice(combos, design.batch_size))
        if not chunk:
            return
        yield offset, np.asarray(chunk, dtype=np.int64)
        offset += len(chunk)


def _bits_from_index_matrix(idx: np.ndarray, n_units: int) -> np.ndarray:
    w = np.zeros((idx.shape[0], n_units), dtype=np.int8)
    w[np.arange(idx.shape[0])[:, None], idx] = 1
    return w


def enumerate_exact(X, design: DesignSpec, out_path=None) -> RandomizationPool:
    """Build the pool by visiting every distinct assignment once."""
    if design.mode != "exact":
        raise InvalidDesignError("enumerate_exact requires design.mode == 'exact'")
    cov = as_covariates(X)
    if cov.n_units != design.n_units:
        raise InvalidDesignError(
            f"covariates have {cov.n_units} rows but design.n_units is {design.n_units}"
        )
    n_candidates = design.n_exact_candidates()
    if n_candidates > design.enumeration_cap:
        raise EnumerationTooLargeError(
            f"exact enumeration of {n_candidates} candidates exceeds the cap of "
            f"{design.enumeration_cap}; use mode='monte_carlo'"
        )
    precision = precompute_precision(cov, design.precision_mode, ridge_scale=design.ridge_scale)
    kernel = _kernel_for(cov, precision)

    stats = np.empty(n_candidates, dtype=np.float64)
    for offset, idx in _exact_batches(design):
        w = _bits_from_index_matrix(idx, design.n_units)
        stats[offset : offset + idx.shape[0]] = kernel.stats(w, design.n_treated)
    accepted, threshold = _select(stats, design.accept_prob)

    pool = RandomizationPool(
        design=design,
        stats=stats[accepted],
        threshold_value=threshold,
        n_candidates=n_candidates,
        accepted_indices=accepted,
        keys=None,
    )

    def accepted_rows():
        pos = 0
        for offset, idx in _exact_batches(design):
            hi = offset + idx.shape[0]
            take = accepted[(accepted >= offset) & (accepted < hi)] - offset
            pos += take.shape[0]
            if take.shape[0]:
                yield _bits_from_index_matrix(idx[take], design.n_units)
            if pos == accepted.shape[0]:
                return

    if out_path is not None:
        _write_pool_file(pool, out_path, accepted_rows())
    else:
        _check_full_cap(design, pool.n_accepted)
        pool.assignments = (
            np.vstack(list(accepted_rows()))
            if pool.n_accepted
            else np.empty((0, design.n_units), dtype=np.int8)
        )
    return pool


def generate_pool(X, design: DesignSpec, workers: int | None = None, out_path=None) -> RandomizationPool:
    """Dispatch to exact enumeration or Monte Carlo per the design mode."""
    if design.mode == "exact":
        return enumerate_exact(X, design, out_path=out_path)
    return monte_carlo_pool(X, design, workers=workers, out_path=out_path)


def _regen_batches(pool: RandomizationPool):
    design = pool.design
    for lo in range(0, pool.n_accepted, design.batch_size):
        draws = pool.keys[lo : lo + design.batch_size, 1]
        yield keymod.batch_assignments(
            design.root_seed, draws, design.n_units, design.n_treated
        )


def regenerate_assignments(pool: RandomizationPool) -> np.ndarray:
    """Rebuild the accepted assignment matrix from stored keys."""
    if pool.keys is None:
        raise InvalidDesignError(
            "pool stores no keys; exact-mode pools carry explicit assignments instead"
        )
    if pool.n_accepted == 0:
        return np.empty((0, pool.design.n_units), dtype=np.int8)
    return np.vstack(list(_regen_batches(pool)))


def pool_assignment_matrix(pool: RandomizationPool) -> np.ndarray:
    """Explicit assignments for a pool, regenerating from keys if needed."""
    if pool.assignments is not None:
        return pool.assignments
    return regenerate_assignments(pool)


def pool_summary(pool: RandomizationPool) -> dict:
    """Descriptive statistics of the accepted pool."""
    s = np.sort(pool.stats)
    if s.size:
        q1, med, q3 = (float(v) for v in np.quantile(s, [0.25, 0.5, 0.75]))
    else:
        q1 = med = q3 = float("nan")
    return {
        "n_units": pool.design.n_units,
        "n_treated": pool.design.n_treated,
        "n_candidates": pool.n_candidates,
        "n_accepted": pool.n_accepted,
        "acceptance_rate": pool.n_accepted / pool.n_candidates,
        "threshold_value": pool.threshold_value,
        "stat_min": float(s[0]) if s.size else float("nan"),
        "stat_q1": q1,
        "stat_median": med,
        "stat_q3": q3,
        "stat_mean": float(s.mean()) if s.size else float("nan"),
        "stat_max": float(s[-1]) if s.size else float("nan"),
    }


def _fmt(x: float) -> str:
    return repr(float(x))


def _design_header(pool: RandomizationPool) -> str:
    payload = pool.design.to_json_dict()
    payload["threshold_value"] = pool.threshold_value
    payload["n_candidates"] = pool.n_candidates
    return json.dumps(payload, sort_keys=True)


def _pool_rows(pool: RandomizationPool, bits_batches):
    storage = pool.design.storage
    with_keys = storage in ("keys", "both") and pool.keys is not None
    with_bits = storage in ("full", "both") or pool.keys is None
    if with_keys and with_bits:
        header = "key_seed,key_draw,stat," + ",".join(
            f"w_{i + 1}" for i in range(pool.design.n_units)
        )
    elif with_keys:
        header = "key_seed,key_draw,stat"
    else:
        header = "stat," + ",".join(f"w_{i + 1}" for i in range(pool.design.n_units))
    yield header
    i = 0
    if with_bits:
        for batch in bits_batches:
            for row in batch:
                cells = []
                if with_keys:
                    cells += [str(int(pool.keys[i, 0])), str(int(pool.keys[i, 1]))]
                cells.append(_fmt(pool.stats[i]))
                cells.append(",".join("1" if b else "0" for b in row))
                yield ",".join(cells)
                i += 1
    else:
        for i in range(pool.n_accepted):
            yield f"{int(pool.keys[i, 0])},{int(pool.keys[i, 1])},{_fmt(pool.stats[i])}"


def _write_pool_file(pool: RandomizationPool, path, bits_batches):
    """Atomically write the pool CSV (temp file + rename)."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".fastrr-pool-", dir=directory, text=True)
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(POOL_MAGIC + "\n")
            f.write("# design " + _design_header(pool) + "\n")
            for line in _pool_rows(pool, bits_batches):
                f.write(line + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_pool(pool: RandomizationPool, path):
    """Serialize a pool per its storage mode."""
    needs_bits = pool.design.storage in ("full", "both") or pool.keys is None
    if needs_bits:
        if pool.assignments is not None:
            batches = iter([pool.assignments])
        else:
            batches = _regen_batches(pool)
    else:
        batches = iter(())
    _write_pool_file(pool, path, batches)


def read_pool(path) -> RandomizationPool:
    """Parse a pool file written by :func:`write_pool`."""
    with open(str(path), "r", newline="") as f:
        magic = f.readline().rstrip("\r\n")
        if magic != POOL_MAGIC:
            raise PoolFormatError(f"not a pool file (bad magic line {magic!r})")
        design_line = f.readline().rstrip("\r\n")
        if not design_line.startswith("# design "):
            raise PoolFormatError("missing design header line")
        try:
            meta = json.loads(design_line[len("# design ") :])
        except json.JSONDecodeError as exc:
            raise PoolFormatError(f"invalid design JSON: {exc}") from None
        header = f.readline().rstrip("\r\n")
        cols = header.split(",")
        has_keys = cols[:2] == ["key_seed", "key_draw"]
        n_units = int(meta["n_units"])
        expect_bits = (len(cols) > 3) if has_keys else (len(cols) > 1)
        seeds, draws, stats, rows = [], [], [], []
        for lineno, line in enumerate(f, start=4):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(cols):
                raise PoolFormatError(f"row at line {lineno} has {len(parts)} fields, expected {len(cols)}")
            at = 0
            if has_keys:
                seeds.append(int(parts[0]))
                draws.append(int(parts[1]))
                at = 2
            stats.append(float(parts[at]))
            if expect_bits:
                bits = parts[at + 1 :]
                if len(bits) != n_units:
                    raise PoolFormatError(f"row at line {lineno} has {len(bits)} assignment bits, expected {n_units}")
                rows.append([int(b) for b in bits])
    max_draws = int(meta["max_draws"])
    design = DesignSpec(
        n_units=n_units,
        n_treated=int(meta["n_treated"]),
        accept_prob=float(meta["accept_prob"]),
        mode=str(meta["mode"]),
        max_draws=max_draws,
        batch_size=max(1, min(10_000, max_draws)),
        precision_mode=str(meta["precision_mode"]),
        ridge_scale=float(meta.get("ridge_scale", 0.01)),
        root_seed=int(meta["root_seed"]),
        storage=str(meta["storage"]),
    )
    stats_arr = np.asarray(stats, dtype=np.float64)
    if stats_arr.shape[0] == 0:
        raise EmptyPoolError("pool file contains no accepted rows")
    pool = RandomizationPool(
        design=design,
        stats=stats_arr,
        threshold_value=float(meta["threshold_value"]),
        n_candidates=int(meta["n_candidates"]),
        accepted_indices=np.asarray(draws, dtype=np.int64) if has_keys else None,
        keys=np.column_stack(
            [np.asarray(seeds, dtype=np.uint64), np.asarray(draws, dtype=np.uint64)]
        )
        if has_keys
        else None,
        assignments=np.asarray(rows, dtype=np.int8) if rows else None,
    )
    return pool


def pools_equal(a: RandomizationPool, b: RandomizationPool) -> bool:
    """Bitwise equality of pool contents (selection, stats, threshold)."""
    if a.n_candidates != b.n_candidates or a.n_accepted != b.n_accepted:
        return False
    if a.threshold_value != b.threshold_value:
        return False
    if not np.array_equal(a.stats, b.stats):
        return False
    if (a.accepted_indices is None) != (b.accepted_indices is None):
        return False
    if a.accepted_indices is not None and not np.array_equal(a.accepted_indices, b.accepted_indices):
        return False
    return True
