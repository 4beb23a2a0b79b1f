import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from klfusion.raster import RasterStack
from klfusion.sar_filter import (
    FilterConvergenceError,
    FilterParams,
    FilterState,
    JacobiPreconditioner,
    build_laplacian,
    filter_first,
    filter_stack,
    filter_step,
    map_objective,
    solve_spd,
)

TIGHT = FilterParams.from_weights(1.0, 0.5, solver_tol=1e-10, max_iters=2000)


def dense_first(y, obs, op, p):
    A = np.diag(p.data_weight * obs) + p.smooth_weight * op.DtD.toarray()
    return np.linalg.solve(A, p.data_weight * obs * y)


def dense_step(y, obs, prev, op, p):
    A = np.diag(p.data_weight * obs + p.temporal_weight) + p.smooth_weight * op.DtD.toarray()
    return np.linalg.solve(A, p.data_weight * obs * y + p.temporal_weight * prev)


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def tv(x, n1, n2):
    g = x.reshape(n1, n2)
    return np.abs(np.diff(g, axis=0)).sum() + np.abs(np.diff(g, axis=1)).sum()


# Laplacian ----------------------------------------------------------------

def test_small_grid_rows_sum_to_zero():
    op = build_laplacian(2, 2)
    assert np.allclose(op.D.sum(axis=1), 0.0)


def test_center_row_cross():
    D = build_laplacian(3, 3).D.toarray()
    row = D[4]
    assert row[4] == -4
    assert sorted(np.flatnonzero(row == 1).tolist()) == [1, 3, 5, 7]
    assert np.count_nonzero(row) == 5


@pytest.mark.parametrize("stencil", ["5", "9"])
@settings(max_examples=15, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6))
def test_laplacian_spectrum(stencil, n1, n2):
    op = build_laplacian(n1, n2, stencil)
    D = op.D.toarray()
    assert np.allclose(D, D.T)
    assert np.abs(D @ np.ones(n1 * n2)).max() <= 1e-12
    w, v = np.linalg.eigh(op.DtD.toarray())
    assert w.min() >= -1e-12
    c = v[:, 0] * np.sign(v[0, 0])
    assert np.allclose(c, 1 / np.sqrt(n1 * n2), atol=1e-6)


def test_small_dims_rejected():
    with pytest.raises(ValueError):
        build_laplacian(1, 4)


# solver ----------------------------------------------------------------------

def test_identity_one_iteration():
    b = np.arange(1.0, 6.0)
    res = solve_spd(sp.identity(5, format="csr"), b, "none")
    assert np.allclose(res.x, b) and res.iterations == 1


def test_diagonal_jacobi():
    d = np.array([1.0, 2.0, 4.0, 8.0])
    A = sp.diags(d).tocsr()
    b = np.ones(4)
    res = solve_spd(A, b, JacobiPreconditioner(A))
    assert np.allclose(res.x, b / d) and res.iterations <= 2


@pytest.mark.parametrize("kind", ["mic", "jacobi", "none"])
def test_random_spd_matches_direct(kind):
    rng = np.random.default_rng(0)
    a = rng.normal(size=(50, 50))
    A = a @ a.T + 50 * np.eye(50)
    b = rng.normal(size=50)
    res = solve_spd(sp.csr_matrix(A), b, kind, tol=1e-8)
    assert res.converged
    x = np.linalg.solve(A, b)
    assert rel(res.x, x) <= 1e-6
    assert np.linalg.norm(A @ res.x - b) / np.linalg.norm(b) <= 1e-8


def test_iteration_cap_returns_best():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(40, 40))
    A = sp.csr_matrix(a @ a.T + 1e-3 * np.eye(40))
    res = solve_spd(A, rng.normal(size=40), "none", tol=1e-12, max_iters=3)
    assert not res.converged and res.iterations == 3 and np.isfinite(res.residual)


def test_filter_reports_non_convergence():
    op = build_laplacian(6, 6)
    p = FilterParams.from_weights(50.0, 0.5, solver_tol=1e-12, max_iters=1)
    with pytest.raises(FilterConvergenceError) as err:
        filter_first(np.random.default_rng(0).normal(size=36), op, p)
    assert err.value.residual > 0


# MAP updates -------------------------------------------------------------------

def test_first_constant_fixed_point():
    op = build_laplacian(5, 4)
    x = filter_first(np.full(20, -6.5), op, TIGHT)
    assert np.allclose(x, -6.5, atol=1e-8)


def test_first_without_smoothing_returns_data():
    op = build_laplacian(4, 4)
    y = np.random.default_rng(0).normal(size=16)
    x = filter_first(y, op, FilterParams.from_weights(0.0, 0.5))
    assert np.allclose(x, y)


def test_step_constant_fixed_point():
    op = build_laplacian(4, 5)
    state = FilterState(np.full(20, 3.0))
    assert np.allclose(filter_step(np.full(20, 3.0), state, op, TIGHT), 3.0, atol=1e-8)


def test_step_without_temporal_equals_first():
    op = build_laplacian(6, 6)
    y = np.random.default_rng(2).normal(size=36)
    p = FilterParams.from_weights(1.0, 0.0, solver_tol=1e-10, max_iters=2000)
    state = FilterState(np.random.default_rng(3).normal(size=36))
    assert np.allclose(filter_step(y, state, op, p), filter_first(y, op, p), atol=1e-8)


@pytest.mark.parametrize("seed", range(4))
def test_first_and_step_match_dense(seed):
    rng = np.random.default_rng(seed)
    n1, n2 = rng.integers(2, 13, size=2)
    op = build_laplacian(int(n1), int(n2))
    y = rng.normal(size=op.size)
    miss = rng.random(op.size) < 0.15
    miss[0] = False
    p = FilterParams.from_weights(rng.uniform(0.2, 3), rng.uniform(0.1, 2), solver_tol=1e-9, max_iters=3000)
    x0 = filter_first(y, op, p, miss)
    assert rel(x0, dense_first(np.where(miss, 0, y), (~miss).astype(float), op, p)) <= 1e-6
    y1 = rng.normal(size=op.size)
    state = FilterState(x0.copy())
    x1 = filter_step(y1, state, op, p)
    assert rel(x1, dense_step(y1, np.ones(op.size), x0, op, p)) <= 1e-6
    assert np.array_equal(state.estimate, x1)


def test_eight_by_eight_default_tolerance():
    rng = np.random.default_rng(8)
    op = build_laplacian(8, 8)
    p = FilterParams.from_weights()
    y = rng.normal(size=64)
    assert rel(filter_first(y, op, p), dense_first(y, np.ones(64), op, p)) <= 1e-6


def test_missing_pixels_interpolated():
    op = build_laplacian(5, 5)
    y = np.full(25, 2.0)
    y[12] = np.nan
    x = filter_first(y, op, TIGHT)
    assert np.isfinite(x).all() and x[12] == pytest.approx(2.0, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_objective_not_above_inputs(seed):
    rng = np.random.default_rng(seed)
    op = build_laplacian(7, 6)
    p = FilterParams.from_weights(rng.uniform(0.1, 3), rng.uniform(0.1, 2), solver_tol=1e-10, max_iters=3000)
    prev = rng.normal(size=op.size)
    y = rng.normal(size=op.size) * 3
    x = filter_step(y, FilterState(prev.copy()), op, p)
    f = map_objective(x, y, prev, op, p)
    assert f <= map_objective(y, y, prev, op, p) + 1e-9
    assert f <= map_objective(prev, y, prev, op, p) + 1e-9


def test_total_variation_reduced_on_noise():
    op = build_laplacian(10, 10)
    p = FilterParams.from_weights()
    wins = 0
    for seed in range(100):
        y = np.random.default_rng(seed).normal(size=100)
        wins += tv(filter_first(y, op, p), 10, 10) <= tv(y, 10, 10)
    assert wins >= 95


# whole stacks --------------------------------------------------------------------

def test_single_slice_stack():
    y = np.random.default_rng(0).normal(-5, 1, size=(1, 6, 6))
    out = filter_stack(RasterStack(y, [0], "sar-vv"))
    p = FilterParams.from_weights()
    x = filter_first(y[0].ravel(), build_laplacian(6, 6), p)
    assert out.band == "sar-filtered" and out.slices == 1
    assert np.allclose(out.values[0].ravel(), x, atol=1e-5)


def test_band_checked():
    with pytest.raises(ValueError):
        filter_stack(RasterStack(np.zeros((1, 3, 3)), [0], "optical-evi"))


def piecewise(T=6, h=24, w=24):
    truth = np.full((h, w), -4.0)
    truth[:, w // 2:] = -7.0
    return np.repeat(truth[None], T, axis=0)


def test_piecewise_constant_recovered_away_from_edges():
    truth = piecewise()
    out = filter_stack(RasterStack(truth, np.arange(6) * 12, "sar-vh"), TIGHT)
    far = np.ones(truth.shape[1:], dtype=bool)
    far[:, 12 - 4:12 + 4] = False
    assert np.abs(out.values[:, far] - truth[:, far]).max() <= 0.1


def test_speckle_variance_reduced():
    truth = piecewise()
    rng = np.random.default_rng(5)
    noisy = truth + rng.normal(0, 1.0, truth.shape)
    out = filter_stack(RasterStack(noisy, np.arange(6) * 12, "sar-vv"))
    left = (slice(None), slice(2, -2), slice(2, 8))
    right = (slice(None), slice(2, -2), slice(16, 22))
    for region in (left, right):
        assert out.values[region].var() < noisy[region].var()


def test_gappy_stack_has_no_missing_output():
    truth = piecewise(T=3)
    miss = np.random.default_rng(1).random(truth.shape) < 0.1
    out = filter_stack(RasterStack(truth, [0, 12, 24], "sar-vv", miss), FilterParams.from_weights())
    assert not out.missing.any()
