import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import expm

from bridgesim import (
    EvaluationError, InvalidArgument, LinearModel, check_controllable, covariance_table,
    fundamental_matrix, left_pinv, make_uniform_grid,
)
from bridgesim.linalg import M, R

# --------------------------------------------------------------------------
# left_pinv
# --------------------------------------------------------------------------


def test_pinv_examples():
    assert np.allclose(left_pinv(np.eye(3)), np.eye(3), atol=1e-15)
    assert np.array_equal(left_pinv(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]))
    assert np.allclose(left_pinv([[1.0], [1.0]]), [[0.5, 0.5]], atol=1e-15)


def _penrose(Mx, P):
    scale = max(np.abs(Mx).max(), 1e-300)
    pscale = max(np.abs(P).max(), 1e-300)
    assert np.abs(Mx @ P @ Mx - Mx).max() <= 1e-10 * scale
    assert np.abs(P @ Mx @ P - P).max() <= 1e-10 * pscale
    S = P @ Mx
    assert np.abs(S - S.T).max() <= 1e-10 * max(np.abs(S).max(), 1.0)


def test_pinv_random_4x3():
    rng = np.random.default_rng(12)
    for _ in range(100):
        Mx = rng.standard_normal((4, 3))
        _penrose(Mx, left_pinv(Mx))


def test_pinv_rank_deficient():
    rng = np.random.default_rng(3)
    for _ in range(50):
        Mx = rng.standard_normal((5, 2)) @ rng.standard_normal((2, 4))
        _penrose(Mx, left_pinv(Mx))


def _clear_of_cutoff(Mx):
    # singular values close to the rank cutoff sqrt(n eps) s_max are truncated by design,
    # and for those M M+ M = M cannot hold to 1e-10; keep spectra well away from it
    s = np.linalg.svd(Mx, compute_uv=False)
    if s[0] == 0:
        return True
    r = s / s[0]
    return bool(np.all((r == 0) | (r > 1e-5)))


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-100, 100, allow_subnormal=False)))
def test_pinv_penrose_property(Mx):
    assume(_clear_of_cutoff(Mx))
    _penrose(Mx, left_pinv(Mx))


@given(st.floats(-300, 300), st.integers(0, 10 ** 6))
def test_pinv_scale_covariance(log_scale, seed):
    Mx = np.random.default_rng(seed).standard_normal((4, 3))
    c = 10.0 ** (log_scale / 10)
    assert np.allclose(left_pinv(c * Mx) * c, left_pinv(Mx), rtol=1e-10, atol=1e-12)


def test_pinv_truncates_below_cutoff():
    P = left_pinv(np.diag([1.0, 1e-9]))
    assert np.array_equal(P, np.diag([1.0, 0.0]))
    assert np.array_equal(left_pinv(np.zeros((2, 3))), np.zeros((3, 2)))


# --------------------------------------------------------------------------
# fundamental matrix
# --------------------------------------------------------------------------


def test_zero_generator_gives_identity():
    f = fundamental_matrix(lambda t: np.zeros((2, 2)), make_uniform_grid(1.0, 10))
    assert np.array_equal(f.P, np.broadcast_to(np.eye(2), f.P.shape))


def test_constant_generator_matches_expm():
    A = np.array([[-0.5, 1.3], [-0.7, 0.2]])
    f = fundamental_matrix(lambda t: A, make_uniform_grid(1.0, 100))
    assert np.abs(f.P[-1] - expm(A)).max() < 1e-8
    assert np.abs(f.P[-1] @ f.P_inv[-1] - np.eye(2)).max() < 1e-8


def test_time_dependent_scalar():
    f = fundamental_matrix(lambda t: np.array([[t]]), make_uniform_grid(1.0, 100))
    exact = np.exp(f.grid.nodes ** 2 / 2)
    assert np.max(np.abs(f.P[:, 0, 0] / exact - 1)) < 1e-8
    assert np.max(np.abs(f.P_inv[:, 0, 0] * exact - 1)) < 1e-8


def test_fourth_order_convergence():
    A = np.array([[0.0, 2.0], [-3.0, -0.4]])
    errs = []
    for K in (10, 20):
        f = fundamental_matrix(lambda t: A, make_uniform_grid(2.0, K))
        errs.append(np.abs(f.P[-1] - expm(2.0 * A)).max())
    assert errs[0] / errs[1] >= 12


def test_non_finite_generator():
    with pytest.raises(EvaluationError):
        fundamental_matrix(lambda t: np.array([[np.nan]]), make_uniform_grid(1.0, 4))


# --------------------------------------------------------------------------
# covariance tables
# --------------------------------------------------------------------------


def test_brownian_covariance():
    g = make_uniform_grid(1.0, 10)
    tab = covariance_table(LinearModel([[0.0]], [0.0], [[1.0]]), g)
    assert np.allclose(tab.G[:, 0, 0], g.nodes, atol=1e-15)
    assert R(0.3, 0.7, tab)[0, 0] == pytest.approx(0.3, abs=1e-14)
    assert R(0.7, 0.3, tab)[0, 0] == pytest.approx(0.3, abs=1e-14)
    for t in g.nodes:
        assert M(t, tab)[0, 0] == pytest.approx(1.0 - t, abs=1e-14)
    with pytest.raises(InvalidArgument):
        R(0.35, 0.7, tab)


def _integrated_bm(s):
    return LinearModel([[0, 1], [0, 0]], [0, 0], [[0], [s]])


def test_integrated_bm_table():
    s = 1.7
    g = make_uniform_grid(1.0, 50)
    tab = covariance_table(_integrated_bm(s), g)
    t = g.nodes
    exact = s * s * np.stack([np.stack([t ** 3 / 3, -t ** 2 / 2], -1),
                              np.stack([-t ** 2 / 2, t], -1)], -2)
    # the integrand is quadratic in u, so the trapezoid leaves an O(dt^2) error on one entry
    assert np.abs(tab.G - exact).max() < s * s * g.mesh() ** 2
    assert np.allclose(M(0.0, tab), s * s * np.array([[1 / 3, -1 / 2], [-1 / 2, 1]]), atol=1e-3)


def test_integrated_bm_table_converges():
    errs = []
    for K in (100, 200):
        tab = covariance_table(_integrated_bm(1.0), make_uniform_grid(1.0, K))
        errs.append(abs(tab.G[-1, 0, 0] - 1 / 3))
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)


def test_sqrt_sigma():
    g = make_uniform_grid(1.0, 1000)
    tab = covariance_table(LinearModel([[0.0]], [0.0], lambda t: np.array([[np.sqrt(t)]])), g)
    exact = g.nodes[1:] ** 2 / 2
    assert np.max(np.abs(tab.G[1:, 0, 0] / exact - 1)) < 1e-4


def test_table_properties():
    model = LinearModel(lambda t: np.array([[-1.0, 0.3 * t], [0.1, -0.2]]), [0.5, 0.0],
                        lambda t: np.array([[1.0, 0.0], [np.sin(t), 0.5]]))
    g = make_uniform_grid(2.0, 60)
    tab = covariance_table(model, g)
    assert np.array_equal(tab.G[0], np.zeros((2, 2)))
    inc = np.diff(tab.G, axis=0)
    assert np.linalg.eigvalsh(0.5 * (inc + np.swapaxes(inc, 1, 2))).min() >= -1e-10
    for i, j in [(3, 17), (0, 60), (40, 41)]:
        assert np.allclose(tab.R_index(i, j).T, tab.R_index(j, i), atol=1e-13)
        Rtt = tab.R_index(j, j)
        assert np.allclose(Rtt, Rtt.T, atol=1e-13)
        assert np.linalg.eigvalsh(Rtt).min() >= -1e-12
    assert np.abs(np.einsum("kij,kjl->kil", tab.fsol.P, tab.fsol.P_inv) - np.eye(2)).max() < 1e-8


# --------------------------------------------------------------------------
# controllability
# --------------------------------------------------------------------------


def test_controllability_brownian():
    g = make_uniform_grid(1.0, 100)
    rep = check_controllable(covariance_table(LinearModel([[0.0]], [0.0], [[1.0]]), g), tol=1e-8)
    assert rep.passed
    assert rep.min_eigenvalue == pytest.approx(g.dt[-1], rel=1e-10)


def test_controllability_degenerate_noise():
    g = make_uniform_grid(1.0, 10)
    tab = covariance_table(LinearModel([[0.0]], [0.0], [[0.0]]), g)
    for tol in (None, 1e-8):
        rep = check_controllable(tab, tol)
        assert not rep.passed
        assert rep.min_eigenvalue == 0.0


def test_controllability_integrated_bm():
    s, g = 0.8, make_uniform_grid(1.0, 200)
    tab = covariance_table(_integrated_bm(s), g)
    rep = check_controllable(tab)
    assert rep.passed
    i = g.K // 2
    tau = 1.0 - g.nodes[i]
    assert np.linalg.det(tab.M_index(i)) == pytest.approx(s ** 4 * tau ** 4 / 12, rel=1e-3)


def test_controllability_rank_one_noise_in_2d_fails():
    tab = covariance_table(LinearModel(np.zeros((2, 2)), [0, 0], [[1.0], [1.0]]),
                           make_uniform_grid(1.0, 10))
    assert not check_controllable(tab).passed
