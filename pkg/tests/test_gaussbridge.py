import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bridgesim import (
    BridgeProblem, ControllabilityError, GaussianBridgeKit, InvalidArgument, LinearModel, NumericError,
    bridge2d_closed_form, bridge2d_model, bridge_sde_drift, case1_log_weight, condition_path,
    gaussian_conditioning_oracle, make_uniform_grid, sample_bridge_sde, sample_xi,
)
from bridgesim.gaussbridge import (
    bridge2d_closed_batch, bridge2d_gain, bridge2d_sde_batch, bridge2d_sde_drift, integrated_bm_scale,
    psd_factor,
)
from bridgesim.integrate import NoiseStream
from bridgesim.linalg import covariance_table
from conftest import cov_se, mc_close, mean_se


def _kit(A, b, sigma, u, v, T=1.0, K=100, h=None):
    model = LinearModel(A, b, sigma, h=h)
    return GaussianBridgeKit(model, BridgeProblem(u, v, T), make_uniform_grid(T, K))


# --------------------------------------------------------------------------
# kit invariants and the unconditioned process
# --------------------------------------------------------------------------


def test_kit_invariants_ou():
    kit = _kit([[-1.0]], [0.3], [[1.0]], [1.0], [0.5])
    assert np.array_equal(kit.mean_xi[0], [1.0])
    P = kit.RTT_pinv
    assert np.abs(P @ kit.R_TT @ P - P).max() < 1e-8


def test_kit_rejects_mismatched_horizon():
    with pytest.raises(InvalidArgument):
        GaussianBridgeKit(LinearModel([[0.0]], [0.0], [[1.0]]), BridgeProblem([0.0], [1.0], 2.0),
                          make_uniform_grid(1.0, 10))


def test_deterministic_degenerate_path():
    kit = _kit([[0.0]], [0.0], [[0.0]], [0.7], [0.7], K=10)
    xi = sample_xi(kit, NoiseStream(1, 0))
    assert np.array_equal(xi.values[:, 0], np.full(11, 0.7))


def test_brownian_terminal_variance():
    kit = _kit([[0.0]], [0.0], [[1.0]], [0.0], [0.0], T=2.0, K=10)
    xT = kit.sample_xi_batch(5, np.arange(100_000))[:, -1, 0]
    var = xT.var(ddof=1)
    se = 2.0 * np.sqrt(2.0 / (xT.size - 1))
    assert abs(var - 2.0) < 3 * se


def test_ou_terminal_mean():
    kit = _kit([[-1.0]], [0.0], [[1.0]], [1.0], [0.0], K=10)
    xT = kit.sample_xi_batch(6, np.arange(100_000))[:, -1, 0]
    m, se = mean_se(xT)
    assert mc_close(m, np.exp(-1.0), se)


def test_exact_stepping_has_exact_marginals_on_coarse_grid():
    # two steps only: exact transitions must still give the OU variance (1 - e^{-2T})/2
    kit = _kit([[-1.0]], [0.0], [[1.0]], [0.0], [0.0], T=1.0, K=2)
    xT = kit.sample_xi_batch(9, np.arange(100_000))[:, -1, 0]
    var, se = cov_se(xT, xT)
    # the covariance table is a trapezoid rule, so allow its O(dt^2) error on top of noise
    exact = (1 - np.exp(-2.0)) / 2
    assert abs(var - kit.R_TT[0, 0]) < 3 * se
    assert abs(kit.R_TT[0, 0] - exact) < 0.05


def test_psd_factor_rank_deficient():
    v = np.array([[1.0], [2.0], [-1.0]])
    C = v @ v.T
    L = psd_factor(C)
    assert np.allclose(L @ L.T, C, atol=1e-14)
    with pytest.raises(NumericError):
        psd_factor(np.diag([1.0, -1.0]))
    assert np.array_equal(psd_factor(np.zeros((2, 2))), np.zeros((2, 2)))


# --------------------------------------------------------------------------
# conditioning
# --------------------------------------------------------------------------


def test_condition_path_fixed_point():
    kit = _kit([[-1.0]], [0.0], [[1.0]], [0.0], [0.4], K=20)
    xi = sample_xi(kit, NoiseStream(2, 0))
    shifted = xi.values.copy()
    shifted[-1] = 0.4
    from bridgesim import Path

    p = condition_path(kit, Path(kit.grid, shifted))
    assert np.array_equal(p.values, shifted)


def test_condition_path_brownian_map():
    kit = _kit([[0.0]], [0.0], [[1.0]], [0.0], [1.5], T=2.0, K=40)
    xi = sample_xi(kit, NoiseStream(3, 7))
    p = condition_path(kit, xi)
    t = kit.grid.nodes
    expected = xi.values[:, 0] - (t / 2.0) * (xi.values[-1, 0] - 1.5)
    assert np.allclose(p.values[:, 0], expected, atol=1e-13)


@pytest.mark.parametrize("A,b,sigma,u,v", [
    ([[-1.0]], [0.0], [[1.0]], [1.0], [0.0]),
    ([[0.5, 1.0], [-1.0, -0.3]], [0.1, 0.0], [[1.0, 0.0], [0.2, 0.7]], [0.0, 1.0], [3.0, -2.0]),
    ([[0.0, 1.0], [0.0, 0.0]], [0.0, 0.0], [[0.0], [1.3]], [0.0, 0.0], [1.0, -1.0]),
])
def test_conditioned_endpoint_exact(A, b, sigma, u, v):
    kit = _kit(A, b, sigma, u, v, K=50)
    p = kit.condition_batch(kit.sample_xi_batch(4, np.arange(200)))
    err = np.abs(p[:, -1] - np.asarray(v)).max()
    assert err <= 1e-10 * (1 + np.linalg.norm(v))
    assert np.array_equal(p[:, 0], np.broadcast_to(u, p[:, 0].shape))


# --------------------------------------------------------------------------
# bridge SDE drift
# --------------------------------------------------------------------------


def test_bridge_drift_brownian_reduction():
    kit = _kit([[0.0]], [0.0], [[1.0]], [0.3], [1.0], T=1.0, K=10)
    for t in kit.grid.nodes[:-1]:
        for q in (-1.0, 0.0, 0.25, 2.0):
            got = bridge_sde_drift(kit, t, [q])[0]
            assert got == pytest.approx((1.0 - q) / (1.0 - t), rel=1e-12, abs=1e-12)
    with pytest.raises(InvalidArgument):
        bridge_sde_drift(kit, 1.0, [0.0])


def test_bridge_drift_no_noise():
    kit = _kit([[-0.5]], [0.2], [[0.0]], [0.3], [1.0], K=10)
    assert bridge_sde_drift(kit, 0.3, [2.0])[0] == pytest.approx(-0.5 * 2.0 + 0.2, abs=1e-15)


def test_bridge_drift_singular_gramian():
    kit = _kit(np.zeros((2, 2)), [0, 0], [[1.0], [1.0]], [0, 0], [1, 1], K=10)
    with pytest.raises(ControllabilityError):
        bridge_sde_drift(kit, 0.5, [0.0, 0.0])


def test_bridge_drift_transports_conditioned_mean():
    kit = _kit([[-0.8]], [0.4], lambda t: np.array([[1.0 + 0.5 * t]]), [0.5], [1.2], K=2000)
    mean_p = kit.condition_batch(kit.mean_xi[None])[0, :, 0]
    dt = kit.grid.dt[0]
    for i in (200, 1000, 1700):
        fd = (mean_p[i + 1] - mean_p[i - 1]) / (2 * dt)
        drift = bridge_sde_drift(kit, kit.grid.nodes[i], [mean_p[i]])[0]
        assert drift == pytest.approx(fd, rel=1e-4, abs=1e-6)


def test_bridge_sde_pins_endpoint():
    kit = _kit([[-1.0]], [0.0], [[1.0]], [0.0], [0.9], K=200)
    q = sample_bridge_sde(kit, NoiseStream(1, 2))
    assert q.values[-1, 0] == 0.9
    unpinned = sample_bridge_sde(kit, NoiseStream(1, 2), pin=False)
    assert np.array_equal(q.values[:-1], unpinned.values[:-1])
    assert abs(unpinned.values[-1, 0] - 0.9) < 0.5


# --------------------------------------------------------------------------
# integrated Brownian motion
# --------------------------------------------------------------------------


def test_bridge2d_endpoints():
    grid = make_uniform_grid(2.0, 100)
    p = bridge2d_closed_form([0.3, -1.0], [1.0, 2.0], 0.7, grid, NoiseStream(11, 0))
    assert np.array_equal(p.values[0], [0.3, -1.0])
    assert np.abs(p.values[-1] - [1.0, 2.0]).max() < 1e-10


def test_bridge2d_gain_matches_linear_conditioning():
    s, T = 0.9, 1.5
    grid = make_uniform_grid(T, 30)
    kit = GaussianBridgeKit(bridge2d_model(s), BridgeProblem([0, 0], [1, 1], T), grid)
    closed = bridge2d_gain(grid.nodes, T)
    # the kit's gain comes from trapezoid tables; compare on a coarse tolerance and
    # check the closed form is exact at both ends
    assert np.abs(closed - kit.gain).max() < 5e-3
    assert np.abs(closed[-1] - np.eye(2)).max() < 1e-14
    assert np.array_equal(closed[0], np.zeros((2, 2)))


def test_bridge2d_covariance_at_midpoint():
    s, T, K = 1.0, 1.0, 100
    grid = make_uniform_grid(T, K)
    X = bridge2d_closed_batch([0.0, 0.0], [1.0, 0.5], s, grid, 21, np.arange(100_000))
    half = X[:, K // 2]
    fine = make_uniform_grid(T, 4000)
    C = gaussian_conditioning_oracle(bridge2d_model(s), fine, [1.0, 0.5], [0.0, 0.0]).cov_index(2000, 2000)
    for a in range(2):
        for b in range(2):
            c, se = cov_se(half[:, a], half[:, b])
            assert abs(c - C[a, b]) < 3 * se


def test_bridge2d_drift_examples():
    assert bridge2d_sde_drift(0.0, 1.0, 0.0, [1.0, 0.0], 1.0) == 0.0
    assert bridge2d_sde_drift(1.0, 2.0, 0.0, [1.0, 0.0], 2.0) == -6.0
    with pytest.raises(InvalidArgument):
        bridge2d_sde_drift(1.0, 0.0, 0.0, [0.0, 0.0], 1.0)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5),
       st.floats(0.05, 3.0), st.floats(0.1, 3.0))
def test_bridge2d_drift_is_h_transform(p, q, v1, v2, tau, s):
    # velocity component of s^2 grad log N(v; mean(p, q), Sigma) for the integrated BM transition
    Sigma = s * s * np.array([[tau ** 3 / 3, tau ** 2 / 2], [tau ** 2 / 2, tau]])
    mean = np.array([p + q * tau, q])
    J = np.array([[1.0, tau], [0.0, 1.0]])
    grad = J.T @ np.linalg.solve(Sigma, np.array([v1, v2]) - mean)
    expected = s * s * grad[1]
    got = bridge2d_sde_drift(1.0, p, q, [v1, v2], 1.0 + tau)
    assert got == pytest.approx(expected, rel=1e-7, abs=1e-7)


def test_bridge2d_sde_pins_and_scale_detection():
    grid = make_uniform_grid(1.0, 100)
    X = bridge2d_sde_batch([0, 0], [1, -1], 0.5, grid, 1, np.arange(10))
    assert np.array_equal(X[:, -1], np.tile([1.0, -1.0], (10, 1)))
    assert integrated_bm_scale(bridge2d_model(0.5)) == 0.5
    assert integrated_bm_scale(LinearModel([[-1.0]], [0.0], [[1.0]])) is None


def test_bridge2d_sigma_plus():
    m = bridge2d_model(2.0)
    assert np.array_equal(m.sigma_plus(0.0), [[0.0, 0.5]])
    assert m.check_left_inverse([0.0, 1.0]) == 0.0


# --------------------------------------------------------------------------
# perturbation weight
# --------------------------------------------------------------------------


def test_case1_weight_zero_perturbation():
    kit = _kit([[-1.0]], [0.0], [[1.0]], [0.0], [1.0])
    p = condition_path(kit, sample_xi(kit, NoiseStream(1, 0)))
    assert case1_log_weight(kit, p) == 0.0


@pytest.mark.parametrize("h", [-1.5, 0.0, 0.3, 2.0])
def test_case1_weight_constant_perturbation_telescopes(h):
    kit = _kit([[0.0]], [0.0], [[1.0]], [0.2], [1.0], T=1.5, K=300, h=[h])
    for i in range(5):
        p = condition_path(kit, sample_xi(kit, NoiseStream(3, i)))
        expected = h * (p.values[-1, 0] - p.values[0, 0]) - 0.5 * h * h * 1.5
        assert case1_log_weight(kit, p) == pytest.approx(expected, abs=1e-12)


def test_case1_weight_uses_sigma_plus_of_2d_model():
    from bridgesim import ExprCoefficient

    s = 0.8
    kit = GaussianBridgeKit(bridge2d_model(s, h=ExprCoefficient(["0.5"], 2)),
                            BridgeProblem([0, 0], [1, 0.5], 1.0), make_uniform_grid(1.0, 200))
    X = bridge2d_closed_batch([0, 0], [1, 0.5], s, kit.grid, 2, np.arange(3))
    from bridgesim.gaussbridge import case1_log_weight_batch

    lw = case1_log_weight_batch(kit, X)
    # A p picks up the velocity, which sigma_plus = (0, 1/s) ignores; only dq survives
    expected = 0.5 * (X[:, -1, 1] - X[:, 0, 1]) / s - 0.5 * 0.25 * 1.0
    assert np.allclose(lw, expected, atol=1e-12)


def test_conditioned_law_matches_oracle_covariance_table():
    model = LinearModel([[-1.0]], [0.0], [[1.0]])
    grid = make_uniform_grid(1.0, 100)
    kit = GaussianBridgeKit(model, BridgeProblem([0.0], [1.0], 1.0), grid)
    orc = gaussian_conditioning_oracle(model, grid, [1.0], [0.0])
    assert np.allclose(kit.condition_batch(kit.mean_xi[None])[0], orc.mean, atol=1e-14)
    assert np.allclose(kit.table.G, covariance_table(model, grid).G)
