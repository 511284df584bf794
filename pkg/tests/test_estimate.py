import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bridgesim import (
    BridgeProblem, EstimationError, InvalidArgument, LinearModel, NoiseStream, ObservationSet, Path,
    WeightedSample, coordinate_at, make_uniform_grid, path_integral, posterior_batch, resample,
    sample_posterior_path, self_normalized_estimate, terminal, weight_diagnostics, weighted_estimate,
)
from bridgesim.estimate import ChunkStats, reduce_chunks, segment_sampler
from bridgesim.expr import ExprCoefficient
from bridgesim.integrate import case2_bridge_batch
from bridgesim.oracle import gaussian_multi_conditioning
from conftest import agree, expr_model, mc_close

# --------------------------------------------------------------------------
# estimator arithmetic
# --------------------------------------------------------------------------


def _samples(values, log_weights):
    g = make_uniform_grid(1.0, 2)
    return [WeightedSample(Path(g, [0.0, 0.0, v]), lw) for v, lw in zip(values, log_weights)]


def test_equal_weights_give_sample_mean():
    vals = np.array([0.5, 1.5, -2.0, 4.0])
    r = self_normalized_estimate(terminal(), _samples(vals, np.full(4, -3.7)))
    assert r.estimate == pytest.approx(vals.mean(), rel=1e-15)
    assert r.ess == pytest.approx(4.0, rel=1e-15)
    assert r.n_paths == 4 and r.n_degenerate == 0


def test_single_finite_weight():
    r = self_normalized_estimate(terminal(), _samples([1.0, 2.0, 3.0], [-np.inf, 0.4, -np.inf]))
    assert r.estimate == 2.0
    assert r.ess == 1.0
    assert r.n_degenerate == 2 and r.n_paths == 3


def test_all_degenerate_raises():
    with pytest.raises(EstimationError):
        weighted_estimate([1.0, 2.0], [-np.inf, -np.inf])
    with pytest.raises(InvalidArgument):
        weighted_estimate([1.0, 2.0], [0.0, np.inf])
    with pytest.raises(InvalidArgument):
        weighted_estimate([1.0], [0.0, 0.0])


def test_extreme_log_weights_do_not_overflow():
    r = weighted_estimate([1.0, 3.0], [1000.0, 1000.0 + np.log(3.0)])
    assert r.estimate == pytest.approx(2.5)


_lw = arrays(np.float64, st.integers(1, 60), elements=st.floats(-50, 50))


@given(_lw, st.floats(-1e3, 1e3), st.integers(0, 2 ** 32 - 1))
def test_shift_invariance(lw, c, seed):
    f = np.random.default_rng(seed).standard_normal(lw.size)
    a = weighted_estimate(f, lw)
    b = weighted_estimate(f, lw + c)
    assert b.estimate == pytest.approx(a.estimate, rel=1e-9, abs=1e-9)
    assert b.std_error == pytest.approx(a.std_error, rel=1e-9, abs=1e-9)
    assert b.ess == pytest.approx(a.ess, rel=1e-9)


@given(_lw, st.integers(0, 2 ** 32 - 1))
def test_ess_bounds(lw, seed):
    lw = lw.copy()
    rng = np.random.default_rng(seed)
    lw[rng.random(lw.size) < 0.3] = -np.inf
    if not np.any(np.isfinite(lw)):
        lw[0] = 0.0
    r = weighted_estimate(np.zeros(lw.size), lw)
    assert 1.0 - 1e-12 <= r.ess <= lw.size + 1e-9


@given(_lw, st.integers(1, 7), st.integers(0, 2 ** 32 - 1))
def test_chunk_merge_matches_one_pass(lw, n_chunks, seed):
    rng = np.random.default_rng(seed)
    lw = lw.copy()
    lw[rng.random(lw.size) < 0.2] = -np.inf
    if not np.any(np.isfinite(lw)):
        lw[-1] = 1.0
    f = rng.standard_normal((lw.size, 2))
    whole = weighted_estimate(f, lw)
    cuts = np.array_split(np.arange(lw.size), n_chunks)
    parts = [(f[c], lw[c]) for c in cuts]
    order = rng.permutation(len(parts))
    merged = reduce_chunks([parts[i] for i in order], deterministic=False)
    assert np.allclose(merged.estimate, whole.estimate, rtol=1e-10, atol=1e-12)
    assert np.allclose(merged.std_error, whole.std_error, rtol=1e-7, atol=1e-12)
    assert merged.ess == pytest.approx(whole.ess, rel=1e-10)
    assert merged.n_paths == whole.n_paths and merged.n_degenerate == whole.n_degenerate
    exact = reduce_chunks(parts, deterministic=True)
    assert np.array_equal(exact.estimate, whole.estimate)


def test_empty_chunk_merges():
    a = ChunkStats.from_arrays(np.zeros(3), np.full(3, -np.inf))
    b = ChunkStats.from_arrays(np.array([1.0, 3.0]), np.zeros(2))
    assert a.merge(b).result().estimate == 2.0
    assert b.merge(a).result().n_degenerate == 3


def test_functionals():
    g = make_uniform_grid(2.0, 4)
    p = Path(g, np.stack([g.nodes, 2 * g.nodes], axis=1))
    assert terminal(1)(p) == 4.0
    assert coordinate_at(1.0)(p) == 1.0
    assert path_integral(ExprCoefficient("x2", 2))(p) == pytest.approx(4.0)
    with pytest.raises(InvalidArgument):
        coordinate_at(0.3)(p)


# --------------------------------------------------------------------------
# statistical behaviour
# --------------------------------------------------------------------------


def test_brownian_bridge_midpoint_and_error_calibration():
    model = expr_model(["0"], [["1"]])
    prob = BridgeProblem([0.0], [1.0], 1.0)
    grid = make_uniform_grid(1.0, 100)
    f = coordinate_at(0.5)
    big = self_normalized_estimate(f, case2_bridge_batch(model, prob, grid, 1, np.arange(100_000), False))
    assert mc_close(big.estimate, 0.5, big.std_error)
    ests, ses = [], []
    for r in range(50):
        res = self_normalized_estimate(f, case2_bridge_batch(model, prob, grid, 100 + r,
                                                             np.arange(2000), False))
        ests.append(res.estimate)
        ses.append(res.std_error)
    spread = np.std(ests, ddof=1)
    assert abs(np.mean(ses) / spread - 1) < 0.3


def test_error_calibration_with_nontrivial_weights():
    model = expr_model(["sin(x1)"], [["1"]])
    prob = BridgeProblem([0.0], [1.0], 1.0)
    grid = make_uniform_grid(1.0, 100)
    ests, ses = [], []
    for r in range(50):
        res = self_normalized_estimate(coordinate_at(0.5),
                                       case2_bridge_batch(model, prob, grid, 500 + r, np.arange(2000), False))
        ests.append(res.estimate)
        ses.append(res.std_error)
    assert abs(np.mean(ses) / np.std(ests, ddof=1) - 1) < 0.3


def test_weight_diagnostics_examples():
    rep = weight_diagnostics(np.zeros(10))
    assert rep["log_weight_var"] == 0.0 and rep["ess_fraction"] == 1.0
    half = np.array([0.0, -np.inf] * 5)
    assert weight_diagnostics(half)["n_degenerate"] == 5
    none = weight_diagnostics(np.full(4, -np.inf))
    assert none["ess"] == 0.0


def test_weight_diagnostics_refinement_study():
    model = expr_model(["sin(x1)"], [["1"]])
    prob = BridgeProblem([0.0], [1.0], 1.0)
    coarse = case2_bridge_batch(model, prob, make_uniform_grid(1.0, 200), 1, np.arange(20_000), False)
    fine = case2_bridge_batch(model, prob, make_uniform_grid(1.0, 400), 2, np.arange(20_000), False)
    rep = weight_diagnostics(coarse, fine, coordinate_at(0.5))
    assert rep["refinement"]["stable"]
    assert 0 < rep["ess_fraction"] <= 1


def test_resample_prefers_heavy_paths():
    idx = resample(np.array([0.0, np.log(9.0), -np.inf]), 10_000, seed=3)
    assert np.all(idx != 2)
    assert np.mean(idx == 1) == pytest.approx(0.9, abs=0.02)
    assert np.array_equal(idx, resample(np.array([0.0, np.log(9.0), -np.inf]), 10_000, seed=3))


# --------------------------------------------------------------------------
# posterior paths
# --------------------------------------------------------------------------


def test_observation_set_validation():
    with pytest.raises(InvalidArgument):
        ObservationSet([0.0], [0.5, 0.5], [1.0, 2.0])
    with pytest.raises(InvalidArgument):
        ObservationSet([0.0], [0.0], [1.0])
    with pytest.raises(InvalidArgument):
        ObservationSet([0.0, 1.0], [1.0], [1.0])


def test_single_segment_matches_direct_bridge():
    model = expr_model(["sin(x1)"], [["1"]])
    obs = ObservationSet([0.0], [1.0], [[1.0]])
    post = posterior_batch(model, obs, 50, 4, np.arange(5), "case2-unbounded")
    direct = case2_bridge_batch(model, BridgeProblem([0.0], [1.0], 1.0), make_uniform_grid(1.0, 50), 4,
                                np.arange(5), False)
    assert np.array_equal(post.values, direct.values)
    assert np.array_equal(post.log_weights, direct.log_weights)


def test_two_brownian_segments_hit_observations():
    model = expr_model(["0"], [["1"]])
    obs = ObservationSet([0.0], [0.4, 1.0], [[1.0], [-0.5]])
    s = sample_posterior_path(model, obs, 40, NoiseStream(3, 0), "case2-unbounded")
    assert s.log_weight == 0.0
    assert s.path.at(0.4)[0] == 1.0
    assert s.path.values[-1, 0] == -0.5
    assert s.path.grid.K == 80
    b = posterior_batch(model, obs, 40, 3, [0], "case2-unbounded")
    assert b.extras["segment0_log_weight"][0] == 0.0 and b.extras["segment1_log_weight"][0] == 0.0


def test_ou_posterior_matches_joint_gaussian_conditioning():
    model = LinearModel([[-1.0]], [0.2], [[1.0]])
    times, values = [0.5, 1.0, 1.5], [[0.8], [-0.3], [0.4]]
    obs = ObservationSet([0.0], times, values)
    post = posterior_batch(model, obs, 100, 8, np.arange(20_000), "case1-transform")
    assert post.grid.K == 300
    mean, cov = gaussian_multi_conditioning(model, post.grid, [0.0], [100, 200, 300], values,
                                            [50, 150, 250])
    for j, node in enumerate((50, 150, 250)):
        res = weighted_estimate(post.values[:, node, 0], post.log_weights)
        assert mc_close(res.estimate, mean[j, 0], res.std_error)
    emp = np.cov(post.values[:, [50, 150, 250], 0].T)
    # segments are conditionally independent given the observations
    assert np.abs(cov - np.diag(np.diag(cov))).max() < 1e-10
    assert np.allclose(np.diag(emp), np.diag(cov), rtol=0.05)


def test_segment_sampler_rejects_incompatible_method():
    with pytest.raises(InvalidArgument):
        segment_sampler(LinearModel([[0.0]], [0.0], [[1.0]]), BridgeProblem([0], [1], 1.0),
                        make_uniform_grid(1.0, 4), "case2-bounded")
    with pytest.raises(InvalidArgument):
        segment_sampler(expr_model(["0"], [["1"]]), BridgeProblem([0], [1], 1.0),
                        make_uniform_grid(1.0, 4), "case1-sde")
    with pytest.raises(InvalidArgument):
        segment_sampler(LinearModel([[0.0]], [0.0], [[1.0]]), BridgeProblem([0], [1], 1.0),
                        make_uniform_grid(1.0, 4), "bridge2d-closed")
    with pytest.raises(InvalidArgument):
        segment_sampler(expr_model(["0"], [["1"]]), BridgeProblem([0], [1], 1.0),
                        make_uniform_grid(1.0, 4), "nope")


def test_case1_and_case2_agree_on_shared_model():
    # sigma(t) deterministic and b = sigma h: both constructions target the same bridge law
    T, K, N = 1.0, 400, 20_000
    prob = BridgeProblem([0.0], [1.0], T)
    grid = make_uniform_grid(T, K)
    lin = LinearModel([[0.0]], [0.0], lambda t: np.array([[1.0 + 0.5 * t]]),
                      h=ExprCoefficient(["sin(x1)"], 1))
    gen = expr_model(["(1 + 0.5*t)*sin(x1)"], [["1 + 0.5*t"]])
    f = coordinate_at(0.5)
    r1 = self_normalized_estimate(f, segment_sampler(lin, prob, grid, "case1-transform")(1, np.arange(N)))
    r2 = self_normalized_estimate(f, segment_sampler(gen, prob, grid, "case2-unbounded")(2, np.arange(N)))
    assert agree(r1.estimate, r1.std_error, r2.estimate, r2.std_error)
