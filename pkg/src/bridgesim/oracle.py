"""Reference values for validating bridge samplers.

* Closed-form Brownian-bridge moments.
* Gaussian conditioning of a linear model computed from the covariance
  tables alone (this module's Gaussian part never touches sampling code).
* Brute-force rejection: simulate unconditioned paths and keep those ending
  within ``epsilon`` of the target.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import BridgeProblem, GeneralModel, LinearModel, TimeGrid, make_uniform_grid
from .errors import InvalidArgument, OracleInsufficient
from .linalg import covariance_table, fundamental_matrix, left_pinv

log = logging.getLogger("bridgesim")

# acceptance counts below which the rejection oracle refuses to answer
MIN_ACCEPTED = 30
PILOT_TARGET = 100
PILOT_PATHS = 10_000
# the oracle grid is this many times finer than the grid under test
ORACLE_REFINEMENT = 4


def brownian_bridge_moments(u, v, T: float, s: float, t: float):
    """Mean at ``s`` and covariance between ``s <= t`` of a unit-diffusion bridge."""
    if not 0 <= s <= t <= T:
        raise InvalidArgument(f"need 0 <= s <= t <= T, got s={s}, t={t}, T={T}")
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    mean = u + (v - u) * s / T
    return mean, s * (T - t) / T


@dataclass
class ConditionedGaussian:
    """Mean path and covariance of a conditioned linear process on a grid."""

    grid: TimeGrid
    mean: np.ndarray       # (K+1, d)
    P: np.ndarray
    G: np.ndarray
    gain: np.ndarray       # (K+1, d, d) = R(t_i, T) R(T, T)^+
    R_TT: np.ndarray

    def R(self, i: int, j: int) -> np.ndarray:
        return self.P[i] @ self.G[min(i, j)] @ self.P[j].T

    def cov(self, s: float, t: float) -> np.ndarray:
        """``C(s, t) = R(s, t) - R(s, T) R(T, T)^+ R(T, t)``."""
        i, j = self.grid.index_of(s), self.grid.index_of(t)
        return self.cov_index(i, j)

    def cov_index(self, i: int, j: int) -> np.ndarray:
        K = self.grid.K
        return self.R(i, j) - self.gain[i] @ self.R(K, j)


def _unconditioned_mean(model: LinearModel, grid: TimeGrid, u, P, Q) -> np.ndarray:
    b = np.array([np.reshape(model.b(t), (model.d,)) for t in grid.nodes])
    qb = np.einsum("kij,kj->ki", Q, b)
    acc = np.zeros_like(qb)
    acc[1:] = np.cumsum(0.5 * grid.dt[:, None] * (qb[:-1] + qb[1:]), axis=0)
    return np.einsum("kij,kj->ki", P, np.asarray(u, dtype=float) + acc)


def gaussian_conditioning_oracle(model: LinearModel, grid: TimeGrid, v, u) -> ConditionedGaussian:
    """Conditioned mean ``E xi_s - R(s,T) R(T,T)^+ (E xi_T - v)`` and covariance.

    The perturbation ``h`` of ``model`` is ignored; only ``A``, ``b`` and
    ``sigma`` enter.
    """
    fsol = fundamental_matrix(model.A, grid)
    table = covariance_table(model, grid, fsol)
    P = fsol.P
    K = grid.K
    mean_xi = _unconditioned_mean(model, grid, u, P, fsol.P_inv)
    R_TT = P[K] @ table.G[K] @ P[K].T
    RtT = np.einsum("kij,kjl,ml->kim", P, table.G, P[K])
    gain = RtT @ left_pinv(R_TT)
    mean = mean_xi - np.einsum("kij,j->ki", gain, mean_xi[K] - np.asarray(v, dtype=float))
    return ConditionedGaussian(grid, mean, P, table.G, gain, R_TT)


def gaussian_multi_conditioning(model: LinearModel, grid: TimeGrid, u, obs_idx, obs_values,
                                query_idx):
    """Joint conditioning on several observed nodes.

    Returns the conditioned mean ``(len(query_idx), d)`` and the covariance
    ``(len(query_idx) d, len(query_idx) d)`` of the process at ``query_idx``
    given ``x_{obs_idx[j]} = obs_values[j]``.
    """
    fsol = fundamental_matrix(model.A, grid)
    table = covariance_table(model, grid, fsol)
    P = fsol.P
    mean_xi = _unconditioned_mean(model, grid, u, P, fsol.P_inv)
    d = model.d

    def block(I, J):
        return np.block([[P[i] @ table.G[min(i, j)] @ P[j].T for j in J] for i in I])

    obs_idx = list(obs_idx)
    query_idx = list(query_idx)
    Roo = block(obs_idx, obs_idx)
    Rqo = block(query_idx, obs_idx)
    Rqq = block(query_idx, query_idx)
    gain = Rqo @ left_pinv(Roo)
    resid = (mean_xi[obs_idx] - np.asarray(obs_values, dtype=float).reshape(len(obs_idx), d)).ravel()
    mean = mean_xi[query_idx].ravel() - gain @ resid
    cov = Rqq - gain @ Rqo.T
    return mean.reshape(len(query_idx), d), cov


# --------------------------------------------------------------------------
# rejection oracle
# --------------------------------------------------------------------------


@dataclass
class RejectionResult:
    """Mean of ``f`` over accepted paths with binomial-aware diagnostics."""

    estimate: object
    std_error: object
    n_accepted: int
    n_paths: int
    epsilon: float
    acceptance_rate: float
    acceptance_se: float
    half: "RejectionResult | None" = None

    def to_dict(self):
        out = {
            "estimate": np.asarray(self.estimate).tolist(),
            "std_error": np.asarray(self.std_error).tolist(),
            "n_accepted": self.n_accepted,
            "n_paths": self.n_paths,
            "epsilon": self.epsilon,
            "acceptance_rate": self.acceptance_rate,
            "acceptance_se": self.acceptance_se,
        }
        if self.half is not None:
            out["half_epsilon"] = self.half.to_dict()
        return out

    def shift_within_3sigma(self) -> bool | None:
        """Whether halving ``epsilon`` moved the estimate by less than 3 sigma."""
        if self.half is None:
            return None
        diff = np.abs(np.asarray(self.estimate) - np.asarray(self.half.estimate))
        return bool(np.all(diff < 3 * np.asarray(self.std_error)))


def oracle_grid(grid: TimeGrid) -> TimeGrid:
    """Uniform grid with ``4 K`` steps over the same horizon."""
    return make_uniform_grid(grid.T, ORACLE_REFINEMENT * grid.K)


def default_epsilon(model: GeneralModel, problem: BridgeProblem) -> float:
    """``0.05 sqrt(T) |sigma(0, u)|`` (spectral norm)."""
    s = model.sigma(0.0, problem.u)
    return 0.05 * np.sqrt(problem.T) * float(np.linalg.norm(s, 2))


def _summarise(fv, dist, eps, n):
    acc = dist <= eps
    k = int(acc.sum())
    rate = k / n
    rate_se = float(np.sqrt(rate * (1 - rate) / n))
    if k < MIN_ACCEPTED:
        return None, k, rate, rate_se
    f = fv[acc]
    est = f.mean(axis=0)
    se = f.std(axis=0, ddof=1) / np.sqrt(k)
    return RejectionResult(_sc(est), _sc(se), k, n, eps, rate, rate_se), k, rate, rate_se


def _sc(a):
    a = np.asarray(a, dtype=float)
    return float(a) if a.ndim == 0 else a


def rejection_conditional(model: GeneralModel, problem: BridgeProblem, f, epsilon: float | None,
                          N: int, grid: TimeGrid, seed: int, threads: int | None = 1,
                          pilot: bool = True, halve: bool = True, stream: int = 0,
                          chunk_size: int | None = None) -> RejectionResult:
    """``E[f(x) | |x_T - v| <= epsilon]`` from ``N`` unconditioned Euler paths.

    A pilot block of the first paths estimates the acceptance rate; if fewer
    than 100 acceptances are expected from ``N`` paths the run is abandoned.
    With ``halve`` the same paths are re-filtered at ``epsilon / 2``.

    Raises
    ------
    OracleInsufficient
        Fewer than 30 accepted paths, or a pilot predicting fewer than 100.
    """
    from . import estimate, integrate

    if epsilon is None:
        epsilon = default_epsilon(model, problem)
    if not epsilon > 0:
        raise InvalidArgument("epsilon must be positive")
    if N < 1:
        raise InvalidArgument("need at least one path")
    if abs(grid.T - problem.T) > 1e-12 * max(1.0, problem.T):
        raise InvalidArgument("oracle grid does not end at the bridge horizon")
    f = estimate.as_functional(f)
    v = problem.v
    chunk = chunk_size or integrate.default_chunk_size(grid.K, model.d)
    if f.nodes(grid) is not None and chunk_size is None:
        chunk = integrate.CHUNK_MAX

    # functionals of a few nodes only need those nodes stored
    record = f.nodes(grid)

    def work(ids):
        batch = integrate.forward_batch(model, problem.u, grid, seed, ids, stream=stream,
                                        record=record)
        ok = batch.extras["blowup"] < 0
        dist = np.where(ok, np.linalg.norm(batch.values[:, -1] - v, axis=1), np.inf)
        return np.asarray(f.batch(batch.values, batch.grid), dtype=float), dist

    parts = []
    done = 0
    if pilot and N > PILOT_PATHS:
        parts = integrate.run_chunked(work, PILOT_PATHS, chunk, threads)
        done = PILOT_PATHS
        dist = np.concatenate([p[1] for p in parts])
        expected = np.mean(dist <= epsilon) * N
        log.info("rejection pilot: acceptance rate %.4g, expected %.1f accepted",
                 expected / N, expected)
        if expected < PILOT_TARGET:
            raise OracleInsufficient(
                f"pilot run predicts {expected:.1f} accepted paths (< {PILOT_TARGET}); "
                "increase N or epsilon")
    if done < N:
        parts += integrate.run_chunked(work, N - done, chunk, threads, first_id=done)
    fv = np.concatenate([p[0] for p in parts])
    dist = np.concatenate([p[1] for p in parts])
    res, k, _, _ = _summarise(fv, dist, epsilon, N)
    if res is None:
        raise OracleInsufficient(f"only {k} paths accepted (< {MIN_ACCEPTED})")
    if halve:
        res.half, _, _, _ = _summarise(fv, dist, epsilon / 2, N)
    return res
