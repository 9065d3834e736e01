import dataclasses
import itertools
import math

import numpy as np
import pytest

from fastrr.balance import CovariateMatrix, batch_balance, precompute_precision
from fastrr.errors import (
    EnumerationTooLargeError,
    InvalidDesignError,
    PoolFormatError,
    StorageCapError,
)
from fastrr.generation import (
    DesignSpec,
    RandomizationPool,
    enumerate_exact,
    generate_pool,
    monte_carlo_pool,
    pool_assignment_matrix,
    pool_summary,
    pools_equal,
    read_pool,
    regenerate_assignments,
    write_pool,
)
@pytest.fixture(scope="module")
def cov12():
    rng = np.random.default_rng(100)
    return CovariateMatrix(rng.standard_normal((12, 3)))


def sort_oracle(stats, accept_prob):
    """Accepted index set by full stable sort, independent of the engine."""
    k = max(1, math.floor(accept_prob * len(stats)))
    order = sorted(range(len(stats)), key=lambda i: (stats[i], i))
    return sorted(order[:k])


def all_candidate_stats(cov, design):
    """Every Monte Carlo candidate's statistic via an accept-everything pool."""
    full = dataclasses.replace(design, accept_prob=1.0)
    return monte_carlo_pool(cov, full, workers=1).stats


def test_exact_full_acceptance_enumerates_every_assignment():
    rng = np.random.default_rng(101)
    X = rng.standard_normal((4, 2))
    design = DesignSpec(n_units=4, n_treated=2, accept_prob=1.0, mode="exact", precision_mode="ridge")
    pool = enumerate_exact(X, design)
    assert pool.n_candidates == 6
    assert pool.n_accepted == 6
    expected = np.array(list(itertools.combinations(range(4), 2)))
    got = {tuple(np.nonzero(row)[0]) for row in pool.assignments}
    assert got == {tuple(r) for r in expected}


def test_exact_partial_acceptance_matches_sort_oracle():
    rng = np.random.default_rng(102)
    X = rng.standard_normal((10, 3))
    design = DesignSpec(n_units=10, n_treated=5, accept_prob=0.2, mode="exact")
    pool = enumerate_exact(X, design)
    assert pool.n_candidates == 252
    assert pool.n_accepted == 50

    cov = CovariateMatrix(X)
    prec = precompute_precision(cov, "exact")
    combos = np.array(list(itertools.combinations(range(10), 5)))
    w_all = np.zeros((252, 10), dtype=np.int8)
    w_all[np.arange(252)[:, None], combos] = 1
    stats_all = batch_balance(cov, prec, w_all)
    assert np.array_equal(pool.accepted_indices, np.asarray(sort_oracle(stats_all.tolist(), 0.2)))
    assert np.array_equal(pool.stats, stats_all[pool.accepted_indices])


def test_exact_lexicographic_order_matches_successor_oracle():
    # hand-rolled lexicographic successor as the second route
    def successor(c, n):
        c = list(c)
        t = len(c)
        i = t - 1
        while i >= 0 and c[i] == n - t + i:
            i -= 1
        if i < 0:
            return None
        c[i] += 1
        for j in range(i + 1, t):
            c[j] = c[j - 1] + 1
        return tuple(c)

    seq = []
    cur = (0, 1, 2)
    while cur is not None:
        seq.append(cur)
        cur = successor(cur, 6)
    assert seq == list(itertools.combinations(range(6), 3))


def test_monte_carlo_single_acceptance_is_argmin(cov12):
    design = DesignSpec(n_units=12, n_treated=6, accept_prob=0.01, max_draws=100, batch_size=10, root_seed=9)
    pool = monte_carlo_pool(cov12, design, workers=1)
    stats_all = all_candidate_stats(cov12, design)
    assert pool.n_accepted == 1
    assert pool.accepted_indices[0] == int(np.argmin(stats_all))
    assert pool.threshold_value == stats_all.min()


def test_tie_break_by_draw_order_with_constant_covariate():
    X = np.ones((10, 1))
    design = DesignSpec(
        n_units=10, n_treated=5, accept_prob=0.02, max_draws=100, batch_size=25,
        precision_mode="diagonal", root_seed=3,
    )
    pool = monte_carlo_pool(X, design, workers=1)
    assert pool.n_accepted == 2
    assert pool.accepted_indices.tolist() == [0, 1]
    assert pool.stats[0] == pool.stats[1]


def test_batch_size_invariance_and_sort_oracle(cov12):
    base = DesignSpec(n_units=12, n_treated=6, accept_prob=0.05, max_draws=2000, batch_size=2000, root_seed=21)
    pools = []
    for b in (1, 7, 97, 2000):
        design = dataclasses.replace(base, batch_size=b)
        pools.append(monte_carlo_pool(cov12, design, workers=1))
    for other in pools[1:]:
        assert pools_equal(pools[0], other)
        assert np.array_equal(pools[0].keys, other.keys)

    stats_all = all_candidate_stats(cov12, base)
    assert np.array_equal(pools[0].accepted_indices, np.asarray(sort_oracle(stats_all.tolist(), 0.05)))


def test_worker_count_invariance(cov12):
    design = DesignSpec(n_units=12, n_treated=6, accept_prob=0.1, max_draws=3000, batch_size=100, root_seed=8)
    reference = monte_carlo_pool(cov12, design, workers=1)
    for workers in (2, 5):
        assert pools_equal(reference, monte_carlo_pool(cov12, design, workers=workers))


def test_acceptance_count_law(cov12):
    rng = np.random.default_rng(103)
    for _ in range(10):
        m = int(rng.integers(1, 2000))
        p = float(rng.uniform(0.0005, 1.0))
        design = DesignSpec(
            n_units=12, n_treated=6, accept_prob=p, max_draws=m,
            batch_size=min(500, m), root_seed=int(rng.integers(0, 2**32)),
        )
        pool = monte_carlo_pool(cov12, design, workers=1)
        assert pool.n_accepted == max(1, math.floor(p * m))


def test_balance_dominance(cov12):
    design = DesignSpec(n_units=12, n_treated=6, accept_prob=0.25, max_draws=800, batch_size=128, root_seed=5)
    pool = monte_carlo_pool(cov12, design, workers=1)
    stats_all = all_candidate_stats(cov12, design)
    rejected = np.delete(stats_all, pool.accepted_indices)
    assert pool.stats.max() <= rejected.min()
    assert pool.stats.max() == pool.threshold_value


def test_regeneration_fidelity_and_storage_modes(cov12):
    base = DesignSpec(n_units=12, n_treated=6, accept_prob=0.1, max_draws=500, batch_size=64, root_seed=13)
    keys_pool = monte_carlo_pool(cov12, base, workers=1)
    full_pool = monte_carlo_pool(cov12, dataclasses.replace(base, storage="full"), workers=1)
    both_pool = monte_carlo_pool(cov12, dataclasses.replace(base, storage="both"), workers=1)

    regen = regenerate_assignments(keys_pool)
    assert np.array_equal(regen, full_pool.assignments)
    assert np.array_equal(regen, both_pool.assignments)
    assert full_pool.keys is None and both_pool.keys is not None

    # stored statistics are reproduced exactly from regenerated vectors
    prec = precompute_precision(cov12, base.precision_mode)
    recomputed = batch_balance(cov12, prec, regen)
    assert np.array_equal(recomputed, keys_pool.stats)

    with pytest.raises(InvalidDesignError):
        regenerate_assignments(full_pool)


def test_single_key_regenerates_one_row(cov12):
    design = DesignSpec(n_units=12, n_treated=6, accept_prob=0.001, max_draws=100, batch_size=100, root_seed=2)
    pool = monte_carlo_pool(cov12, design, workers=1)
    assert pool.n_accepted == 1
    mat = regenerate_assignments(pool)
    assert mat.shape == (1, 12)
    assert mat.sum() == 6


def test_pool_summary_arithmetic():
    design = DesignSpec(n_units=12, n_treated=6, accept_prob=0.5, max_draws=6, batch_size=6)
    pool = RandomizationPool(
        design=design,
        stats=np.array([0.1, 0.2, 0.3]),
        threshold_value=0.3,
        n_candidates=6,
        accepted_indices=np.array([0, 1, 2]),
    )
    s = pool_summary(pool)
    assert s["stat_min"] == pytest.approx(0.1)
    assert s["stat_max"] == pytest.approx(0.3)
    assert s["stat_mean"] == pytest.approx(0.2)
    assert s["stat_median"] == pytest.approx(0.2)
    assert s["acceptance_rate"] == pytest.approx(0.5)


def test_full_acceptance_rate_is_one():
    rng = np.random.default_rng(104)
    X = rng.standard_normal((6, 2))
    design = DesignSpec(n_units=6, n_treated=3, accept_prob=1.0, mode="exact")
    assert pool_summary(enumerate_exact(X, design))["acceptance_rate"] == 1.0


def test_accepted_pool_size_shape():
    # keep the top 1% of 1e5 draws over a 20-unit design: 1000 accepted
    rng = np.random.default_rng(105)
    X = rng.standard_normal((20, 5))
    design = DesignSpec(n_units=20, n_treated=10, accept_prob=0.01, max_draws=100_000, batch_size=20_000, root_seed=12345)
    pool = monte_carlo_pool(X, design, workers=1)
    s = pool_summary(pool)
    assert s["n_accepted"] == 1000
    assert s["n_units"] == 20


def test_enumeration_cap_error():
    rng = np.random.default_rng(106)
    X = rng.standard_normal((20, 2))
    design = DesignSpec(n_units=20, n_treated=10, accept_prob=0.1, mode="exact", enumeration_cap=1000)
    with pytest.raises(EnumerationTooLargeError, match="monte_carlo"):
        enumerate_exact(X, design)


def test_invalid_design_validation():
    with pytest.raises(InvalidDesignError):
        DesignSpec(n_units=10, n_treated=5, accept_prob=0.0)
    with pytest.raises(InvalidDesignError):
        DesignSpec(n_units=10, n_treated=5, max_draws=0)
    with pytest.raises(InvalidDesignError):
        DesignSpec(n_units=10, n_treated=5, max_draws=10, batch_size=11)
    with pytest.raises(InvalidDesignError):
        DesignSpec(n_units=10, n_treated=0)


def test_storage_cap_error(cov12):
    design = DesignSpec(
        n_units=12, n_treated=6, accept_prob=0.5, max_draws=1000, batch_size=100,
        storage="full", full_storage_cap=100,
    )
    with pytest.raises(StorageCapError, match="keys"):
        monte_carlo_pool(cov12, design, workers=1)


def test_pool_file_round_trip_and_determinism(tmp_path, cov12):
    base = DesignSpec(n_units=12, n_treated=6, accept_prob=0.1, max_draws=400, batch_size=50, root_seed=77)
    for storage in ("keys", "full", "both"):
        design = dataclasses.replace(base, storage=storage)
        pool = monte_carlo_pool(cov12, design, workers=1)
        path_a = tmp_path / f"pool_{storage}_a.csv"
        path_b = tmp_path / f"pool_{storage}_b.csv"
        write_pool(pool, path_a)
        write_pool(monte_carlo_pool(cov12, design, workers=2), path_b)
        assert path_a.read_bytes() == path_b.read_bytes()

        loaded = read_pool(path_a)
        assert np.array_equal(loaded.stats, pool.stats)
        assert loaded.n_candidates == pool.n_candidates
        assert loaded.threshold_value == pool.threshold_value
        if storage in ("keys", "both"):
            assert np.array_equal(loaded.keys, pool.keys)
            assert np.array_equal(pool_assignment_matrix(loaded), pool_assignment_matrix(pool))
        if storage in ("full", "both"):
            assert np.array_equal(loaded.assignments, pool_assignment_matrix(pool))


def test_streaming_out_path_matches_write_pool(tmp_path, cov12):
    design = DesignSpec(
        n_units=12, n_treated=6, accept_prob=0.2, max_draws=300, batch_size=32,
        root_seed=19, storage="full",
    )
    streamed = tmp_path / "streamed.csv"
    pool = monte_carlo_pool(cov12, design, out_path=streamed, workers=1)
    assert pool.assignments is None  # streamed to disk, not held

    held = monte_carlo_pool(cov12, design, workers=1)
    written = tmp_path / "held.csv"
    write_pool(held, written)
    assert streamed.read_bytes() == written.read_bytes()


def test_exact_streaming_matches_write_pool(tmp_path):
    rng = np.random.default_rng(107)
    X = rng.standard_normal((9, 2))
    design = DesignSpec(n_units=9, n_treated=4, accept_prob=0.3, mode="exact", batch_size=17)
    streamed = tmp_path / "exact_streamed.csv"
    enumerate_exact(X, design, out_path=streamed)
    held = tmp_path / "exact_held.csv"
    write_pool(enumerate_exact(X, design), held)
    assert streamed.read_bytes() == held.read_bytes()


def test_generate_pool_dispatch(cov12):
    exact = DesignSpec(n_units=12, n_treated=6, accept_prob=0.9, mode="exact", batch_size=100)
    mc = DesignSpec(n_units=12, n_treated=6, accept_prob=0.5, max_draws=50, batch_size=50)
    assert generate_pool(cov12, exact).n_candidates == math.comb(12, 6)
    assert generate_pool(cov12, mc).n_candidates == 50


def test_read_pool_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("not,a,pool\n1,2,3\n")
    with pytest.raises(PoolFormatError):
        read_pool(bad)
    bad2 = tmp_path / "bad2.csv"
    bad2.write_text("# fastrr-pool v1\n# wrong header\nstat\n")
    with pytest.raises(PoolFormatError):
        read_pool(bad2)


def test_covariate_row_mismatch(cov12):
    design = DesignSpec(n_units=10, n_treated=5, max_draws=10, batch_size=10)
    with pytest.raises(InvalidDesignError):
        monte_carlo_pool(cov12, design)


def test_worker_resolution_from_environment(monkeypatch, cov12):
    from fastrr.generation import _resolve_workers

    monkeypatch.setenv("FASTRR_THREADS", "3")
    assert _resolve_workers(None) == 3
    assert _resolve_workers(2) == 2
    monkeypatch.delenv("FASTRR_THREADS")
    assert _resolve_workers(None) >= 1
    with pytest.raises(InvalidDesignError):
        _resolve_workers(0)


def test_ridge_scale_changes_pool_and_survives_round_trip(tmp_path):
    rng = np.random.default_rng(108)
    X = rng.standard_normal((30, 40))  # high-dimensional: ridge required
    base = DesignSpec(
        n_units=30, n_treated=15, accept_prob=0.1, max_draws=200, batch_size=50,
        precision_mode="ridge", root_seed=31,
    )
    strong = dataclasses.replace(base, ridge_scale=10.0)
    a = monte_carlo_pool(X, base, workers=1)
    b = monte_carlo_pool(X, strong, workers=1)
    assert not np.array_equal(a.stats, b.stats)

    path = tmp_path / "ridge.csv"
    write_pool(b, path)
    assert read_pool(path).design.ridge_scale == 10.0
    with pytest.raises(InvalidDesignError):
        dataclasses.replace(base, ridge_scale=0.0)
