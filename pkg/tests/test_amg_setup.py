import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from mgpbd.amg_setup import (AmgConfig, aggregate, bootstrap_near_kernel, build_hierarchy,
                             build_prolongator, near_kernel_quality, strength_filter)
from mgpbd.scenes import build_cloth
from mgpbd.sparse import SparseMatrix

from conftest import frame_system, random_spd


def path_graph(n):
    A = sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")
    return SparseMatrix.from_scipy(A)


def partition_ok(agg, n_agg, n):
    return len(agg) == n and set(agg.tolist()) == set(range(n_agg))


def test_strength_filter_extremes():
    A = random_spd(20, density=0.3, seed=0)
    S = strength_filter(A, 0.0)
    off = np.count_nonzero(A.to_dense() - np.diag(np.diag(A.to_dense())))
    assert S.nnz == off
    assert strength_filter(A, 1e9).nnz == 0


def test_strength_filter_hand_example():
    A = SparseMatrix.from_dense([[4.0, 1.0, 0.0], [1.0, 4.0, 3.0], [0.0, 3.0, 4.0]])
    S = strength_filter(A, 0.1).to_dense()
    assert (S != 0).tolist() == [[False, True, False], [True, False, True], [False, True, False]]


def test_strength_filter_drops_weak():
    A = SparseMatrix.from_dense([[4.0, 0.3], [0.3, 4.0]])
    assert strength_filter(A, 0.1).nnz == 0


def test_aggregate_empty_graph():
    S = SparseMatrix(5, 5, np.zeros(6), [], [])
    agg, n_agg = aggregate(S)
    assert n_agg == 5 and list(agg) == [0, 1, 2, 3, 4]


def test_aggregate_path_of_four():
    agg, n_agg = aggregate(strength_filter(path_graph(4)))
    # node 0 seeds {0, 1}; node 2 has an aggregated neighbour and is skipped;
    # node 3 seeds {2, 3} since 2 is still free
    assert n_agg == 2
    assert list(agg) == [0, 0, 1, 1]


def test_aggregate_path_leftover_joins_neighbour():
    agg, n_agg = aggregate(strength_filter(path_graph(5)))
    # {0,1} and {2,3,4}: node 3 seeds with both free neighbours
    assert list(agg) == [0, 0, 1, 1, 1]


def leftover_graph(w14, w34):
    # 0 seeds {0, 1}, 2 seeds {2, 3}; node 4 only touches aggregated nodes
    D = 4.0 * np.eye(5)
    for i, j, w in ((0, 1, 1.0), (2, 3, 1.0), (1, 4, w14), (3, 4, w34)):
        D[i, j] = D[j, i] = -w
    return SparseMatrix.from_dense(D)


def test_aggregate_path_of_six_leftover():
    agg, n_agg = aggregate(strength_filter(path_graph(6)))
    assert list(agg) == [0, 0, 1, 1, 1, 1]


def test_aggregate_leftover_strongest_neighbour():
    agg, _ = aggregate(strength_filter(leftover_graph(1.0, 2.0)))
    assert list(agg) == [0, 0, 1, 1, 1]
    agg, _ = aggregate(strength_filter(leftover_graph(2.0, 1.0)))
    assert list(agg) == [0, 0, 1, 1, 0]


def test_aggregate_leftover_tie_lowest_id():
    agg, _ = aggregate(strength_filter(leftover_graph(1.5, 1.5)))
    assert agg[4] == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 120))
def test_aggregate_is_partition(seed, n):
    A = random_spd(n, density=min(1.0, 4.0 / n), seed=seed)
    agg, n_agg = aggregate(strength_filter(A, 0.1))
    assert partition_ok(agg, n_agg, n)


def test_cloth_4x4_four_aggregates():
    scene = build_cloth(3)
    A, _ = frame_system(scene, 3e-3)
    agg, n_agg = aggregate(strength_filter(A, 0.1))
    assert n_agg == 4
    assert partition_ok(agg, n_agg, A.n_rows)


def test_bootstrap_identity_falls_back_to_ones():
    B = bootstrap_near_kernel(SparseMatrix.identity(10), k=2, sweeps=1)
    assert np.array_equal(B, np.ones((10, 2)))


def test_bootstrap_diagonal_falls_back_to_ones():
    D = SparseMatrix.from_dense(np.diag(np.arange(1.0, 6.0)))
    assert np.array_equal(bootstrap_near_kernel(D, k=1, sweeps=3), np.ones((5, 1)))


def test_bootstrap_reduces_energy(cloth64_system):
    A, _ = cloth64_system
    k = 6
    amax = np.abs(A.values).max()
    X0 = np.stack([np.random.default_rng(0 ^ c).uniform(0.0, amax, A.n_rows) for c in range(k)], axis=1)
    B = bootstrap_near_kernel(A, k, 20, seed=0)
    assert np.all(near_kernel_quality(A, B) <= 0.1 * near_kernel_quality(A, X0))


def test_bootstrap_deterministic(cloth16_system):
    A, _ = cloth16_system
    assert np.array_equal(bootstrap_near_kernel(A, 3, 20, 4), bootstrap_near_kernel(A, 3, 20, 4))


def test_prolongator_one_aggregate():
    P, Bn = build_prolongator(np.zeros(4, dtype=int), 1, np.ones(4))
    assert np.allclose(P.to_dense()[:, 0], 0.5)
    assert np.allclose(Bn, [[2.0]])


def test_prolongator_two_aggregates():
    P, Bn = build_prolongator(np.array([0, 0, 1]), 2, np.ones(3))
    r = 1 / np.sqrt(2)
    assert np.allclose(P.to_dense(), [[r, 0], [r, 0], [0, 1]])
    assert np.allclose(Bn.ravel(), [np.sqrt(2), 1.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_prolongator_orthonormal_and_reconstructs(seed, k):
    rng = np.random.default_rng(seed)
    n, n_agg = 30, 5
    # aggregates of at least k nodes so every block has full rank
    agg = np.sort(np.concatenate([np.repeat(np.arange(n_agg), k), rng.integers(0, n_agg, n - n_agg * k)]))
    rng.shuffle(agg)
    B = rng.normal(size=(n, k))
    P, Bn = build_prolongator(agg, n_agg, B)
    Pd = P.to_dense()
    assert np.linalg.norm(Pd.T @ Pd - np.eye(P.n_cols)) <= 1e-10
    assert np.linalg.norm(Pd @ Bn - B) <= 1e-10 * np.linalg.norm(B)
    assert P.n_cols == n_agg * k
    # each row only touches its own aggregate's block
    for i in range(n):
        cols = np.flatnonzero(Pd[i])
        assert np.all((cols >= agg[i] * k) & (cols < (agg[i] + 1) * k))


def test_prolongator_small_aggregate_drops_columns():
    agg = np.array([0, 0, 0, 1])
    B = np.random.default_rng(0).normal(size=(4, 3))
    P, Bn = build_prolongator(agg, 2, B)
    Pd = P.to_dense()
    assert P.n_cols == 4
    assert np.allclose(Pd.T @ Pd, np.eye(4), atol=1e-12)


def test_prolongator_rejects_bad_aggregation():
    with pytest.raises(ValueError):
        build_prolongator(np.array([0, 2]), 2, np.ones(2))


def test_small_matrix_single_level():
    A = random_spd(300, density=0.02, seed=1)
    h = build_hierarchy(A, AmgConfig(n_kernel_vecs=1))
    assert h.n_levels == 1 and h.coarse_solver is not None


def test_cloth64_hierarchy_invariants(cloth64_system):
    A, _ = cloth64_system
    h = build_hierarchy(A, AmgConfig(n_kernel_vecs=1))
    assert 2 <= h.n_levels <= 5
    sizes = h.sizes
    assert all(b < a for a, b in zip(sizes, sizes[1:]))
    assert sizes[-1] < 400
    for lev in h.levels[:-1]:
        assert partition_ok(lev.agg, lev.agg.max() + 1, lev.size)
        P = lev.P.to_dense()
        assert np.linalg.norm(P.T @ P - np.eye(P.shape[1])) <= 1e-10
    for lev in h.levels[1:]:
        D = lev.A.to_dense()
        assert np.array_equal(D, D.T)
        np.linalg.cholesky(D)


def test_hierarchy_deterministic(cloth16_system):
    A, _ = cloth16_system
    cfg = AmgConfig(n_kernel_vecs=2, min_coarse_size=50)
    h1, h2 = build_hierarchy(A, cfg), build_hierarchy(A, cfg)
    assert h1.sizes == h2.sizes
    for a, b in zip(h1.levels, h2.levels):
        assert np.array_equal(a.A.values, b.A.values)
        assert np.array_equal(a.B, b.B)


def test_stall_guard_stops_coarsening():
    A = SparseMatrix.from_dense(np.diag(np.arange(1.0, 501.0)))
    h = build_hierarchy(A, AmgConfig(n_kernel_vecs=1))
    assert h.stalled and h.n_levels == 1


def test_level_cap():
    A, _ = frame_system(build_cloth(16, diagonals=False), 3e-3)
    h = build_hierarchy(A, AmgConfig(n_kernel_vecs=1, min_coarse_size=2, max_levels=2))
    assert h.n_levels == 2


def test_refresh_matches_rebuild_of_coarse_ops(cloth16_system):
    A, _ = cloth16_system
    cfg = AmgConfig(n_kernel_vecs=1, min_coarse_size=100)
    h = build_hierarchy(A, cfg)
    A2 = A.copy()
    A2.values *= 1.5
    h.refresh(A2)
    Pd = h.levels[0].P.to_dense()
    assert np.allclose(h.levels[1].A.to_dense(), Pd.T @ A2.to_dense() @ Pd, rtol=1e-12, atol=1e-9)
    assert h.levels[0].smoother.lambda_max == pytest.approx(
        build_hierarchy(A2, cfg).levels[0].smoother.lambda_max, rel=1e-6)


def test_report_lists_levels(cloth16_system):
    A, _ = cloth16_system
    h = build_hierarchy(A, AmgConfig(n_kernel_vecs=1, min_coarse_size=100))
    rep = h.report()
    assert rep.startswith(f"levels {h.n_levels}")
    assert rep.count("\nlevel ") == h.n_levels
