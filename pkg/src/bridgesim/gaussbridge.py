"""Exact bridges of linear SDEs and the importance weight of a perturbation.

For ``dxi = (A_t xi + b_t) dt + sigma_t dw`` the process is Gaussian with
covariance ``R(s, t)``; conditioning on ``xi_T = v`` is the linear map
``p_t = xi_t - R(t, T) R(T, T)^+ (xi_T - v)``.  The same law is produced by
the bridge SDE

    dq = (A q + b + sigma sigma' P_t^{-T} M_t^{-1} (P_t^{-1}(E xi_t - q)
          - P_T^{-1}(E xi_T - v))) dt + sigma dw,

and, for the integrated Brownian motion ``(z, z')``, by an explicit cubic
correction.  Adding a perturbation ``sigma_t h(t, x)`` to the drift is
handled by the weight ``sum h' sigma^+ (dp - (A p + b) dt) - 1/2 |h|^2 dt``.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import lapack

from .core import BridgeProblem, LinearModel, Path, TimeGrid
from .errors import ControllabilityError, InvalidArgument, NumericError
from .integrate import NoiseStream, normal_block
from .linalg import (
    CONTROLLABILITY_RTOL, CovarianceTable, FundamentalSolution, covariance_table,
    fundamental_matrix, left_pinv,
)

# relative tolerance on negative eigenvalues when factoring a covariance
PSD_RTOL = 1e-10


def psd_factor(C: np.ndarray) -> np.ndarray:
    """``L`` with ``L L' = C`` for a symmetric positive semidefinite ``C``.

    Uses pivoted Cholesky so rank-deficient blocks are handled; raises
    :class:`NumericError` if ``C`` has eigenvalues below ``-1e-10 * max|lambda|``.
    """
    C = 0.5 * (C + C.T)
    d = C.shape[0]
    scale = float(np.max(np.abs(np.linalg.eigvalsh(C)))) if d else 0.0
    if scale == 0.0:
        return np.zeros_like(C)
    lam_min = float(np.linalg.eigvalsh(C)[0])
    if lam_min < -PSD_RTOL * scale:
        raise NumericError(f"covariance block is not positive semidefinite (eigenvalue {lam_min:.3g})")
    c, piv, rank, info = lapack.dpstrf(C, lower=1, tol=d * np.finfo(float).eps * scale)
    if info < 0:
        raise NumericError("pivoted Cholesky failed")
    L = np.tril(c)
    L[:, rank:] = 0.0
    out = np.zeros_like(L)
    out[piv - 1] = L
    return out


class GaussianBridgeKit:
    """Everything needed to sample and weight linear-model bridges on one grid.

    Attributes
    ----------
    fsol, table : fundamental solution and covariance table
    mean_xi : (K+1, d) array, ``E[xi_t]``
    RTT_pinv : (d, d) array, left pseudo-inverse of ``R(T, T)``
    gain : (K+1, d, d) array, ``R(t_i, T) R(T, T)^+``
    """

    def __init__(self, model: LinearModel, problem: BridgeProblem, grid: TimeGrid,
                 fsol: FundamentalSolution | None = None, table: CovarianceTable | None = None):
        if problem.d != model.d:
            raise InvalidArgument(f"problem dimension {problem.d} != model dimension {model.d}")
        if abs(grid.T - problem.T) > 1e-12 * max(1.0, problem.T):
            raise InvalidArgument(f"grid ends at {grid.T} but the horizon is {problem.T}")
        self.model = model
        self.problem = problem
        self.grid = grid
        self.fsol = fsol if fsol is not None else fundamental_matrix(model.A, grid)
        self.table = table if table is not None else covariance_table(model, grid, self.fsol)
        t = grid.nodes
        d, m = model.d, model.m
        self.A_nodes = np.array([np.reshape(model.A(s), (d, d)) for s in t], dtype=float)
        self.b_nodes = np.array([np.reshape(model.b(s), (d,)) for s in t], dtype=float)
        self.sigma_nodes = np.array([np.reshape(model.sigma(s), (d, m)) for s in t], dtype=float)
        self.sigma_plus_nodes = np.array([np.reshape(model.sigma_plus(s), (m, d)) for s in t],
                                         dtype=float)
        P, Q = self.fsol.P, self.fsol.P_inv
        # E[xi_t] = P_t (u + int_0^t P_s^{-1} b_s ds), trapezoidal
        qb = np.einsum("kij,kj->ki", Q, self.b_nodes)
        acc = np.zeros_like(qb)
        acc[1:] = np.cumsum(0.5 * grid.dt[:, None] * (qb[:-1] + qb[1:]), axis=0)
        self.mean_xi = np.einsum("kij,kj->ki", P, problem.u + acc)
        K = grid.K
        self.R_TT = self.table.R_index(K, K)
        self.RTT_pinv = left_pinv(self.R_TT)
        RtT = np.einsum("kij,kjl,ml->kim", P, self.table.G, P[K])
        self.gain = RtT @ self.RTT_pinv
        # one-step transition xi_{i+1} = Phi_i xi_i + m_i + L_i Z_i
        self.Phi = P[1:] @ Q[:-1]
        self.step_mean = self.mean_xi[1:] - np.einsum("kij,kj->ki", self.Phi, self.mean_xi[:-1])
        dG = np.diff(self.table.G, axis=0)
        self.step_chol = np.array([psd_factor(P[i + 1] @ dG[i] @ P[i + 1].T) for i in range(K)])
        self._sde = None

    @property
    def d(self) -> int:
        return self.model.d

    # ------------------------------------------------------------------
    # sampling the unconditioned Gaussian process
    # ------------------------------------------------------------------

    def sample_xi_batch(self, seed: int, path_ids, stream: int = 0) -> np.ndarray:
        """Exact draws of ``xi`` on the grid, shape ``(n, K+1, d)``."""
        Z = normal_block(seed, path_ids, self.grid.K, self.d, stream)
        n = Z.shape[0]
        out = np.empty((n, self.grid.K + 1, self.d))
        out[:, 0] = self.problem.u
        x = out[:, 0]
        for i in range(self.grid.K):
            x = x @ self.Phi[i].T + self.step_mean[i] + Z[:, i] @ self.step_chol[i].T
            out[:, i + 1] = x
        return out

    def condition_batch(self, xi: np.ndarray) -> np.ndarray:
        """``p = xi - R(t, T) R(T, T)^+ (xi_T - v)`` for a stack of paths."""
        return xi - np.tensordot(xi[:, -1] - self.problem.v, self.gain, axes=([1], [2]))

    # ------------------------------------------------------------------
    # bridge SDE
    # ------------------------------------------------------------------

    def _sde_coefficients(self):
        """Per-node ``(F_i, c_i)`` with bridge drift ``F_i q + c_i`` for ``i < K``."""
        if self._sde is None:
            K = self.grid.K
            Q = self.fsol.P_inv
            target = Q[K] @ (self.mean_xi[K] - self.problem.v)
            F = np.empty((K, self.d, self.d))
            c = np.empty((K, self.d))
            for i in range(K):
                ss = self.sigma_nodes[i] @ self.sigma_nodes[i].T
                if not np.any(ss):
                    # no noise at this node: the correction term vanishes identically
                    F[i], c[i] = self.A_nodes[i], self.b_nodes[i]
                    continue
                Mi = self.table.M_index(i)
                _require_controllable(Mi, float(self.grid.nodes[i]))
                gain = ss @ Q[i].T @ np.linalg.solve(Mi, np.eye(self.d))
                F[i] = self.A_nodes[i] - gain @ Q[i]
                c[i] = self.b_nodes[i] + gain @ (Q[i] @ self.mean_xi[i] - target)
            self._sde = (F, c)
        return self._sde

    def sde_batch(self, seed: int, path_ids, stream: int = 0, pin: bool = True) -> np.ndarray:
        """Euler paths of the bridge SDE; the last value is set to ``v`` when pinned."""
        F, c = self._sde_coefficients()
        m = self.model.m
        Z = normal_block(seed, path_ids, self.grid.K, m, stream)
        dt = self.grid.dt
        n = Z.shape[0]
        out = np.empty((n, self.grid.K + 1, self.d))
        out[:, 0] = self.problem.u
        q = out[:, 0]
        for i in range(self.grid.K):
            dW = Z[:, i] * np.sqrt(dt[i])
            q = q + (q @ F[i].T + c[i]) * dt[i] + dW @ self.sigma_nodes[i].T
            out[:, i + 1] = q
        if pin:
            out[:, -1] = self.problem.v
        return out


def _require_controllable(Mi: np.ndarray, t: float):
    lam = np.linalg.eigvalsh(0.5 * (Mi + Mi.T))
    if not lam[0] > CONTROLLABILITY_RTOL * max(float(np.trace(Mi)), 0.0) or lam[0] <= 0:
        raise ControllabilityError(
            f"Gramian M({t:.6g}) is singular (min eigenvalue {lam[0]:.3g}); "
            "the bridge SDE is ill-posed")


# --------------------------------------------------------------------------
# single-path API
# --------------------------------------------------------------------------


def sample_xi(kit: GaussianBridgeKit, rng: NoiseStream) -> Path:
    """One exact draw of the unconditioned linear process."""
    return Path(kit.grid, kit.sample_xi_batch(rng.seed, [rng.path_index], rng.stream)[0])


def condition_path(kit: GaussianBridgeKit, xi: Path) -> Path:
    """Map an unconditioned draw to a bridge ending at ``v``."""
    if xi.grid != kit.grid:
        raise InvalidArgument("path is not tabulated on the kit's grid")
    return Path(kit.grid, kit.condition_batch(xi.values[None])[0])


def bridge_sde_drift(kit: GaussianBridgeKit, t: float, q) -> np.ndarray:
    """Drift of the linear bridge SDE at grid node ``t < T``."""
    i = kit.grid.index_of(t)
    if i == kit.grid.K:
        raise InvalidArgument("the bridge drift is singular at t = T")
    q = np.asarray(q, dtype=float)
    ss = kit.sigma_nodes[i] @ kit.sigma_nodes[i].T
    if not np.any(ss):
        return kit.A_nodes[i] @ q + kit.b_nodes[i]
    Mi = kit.table.M_index(i)
    _require_controllable(Mi, float(t))
    K = kit.grid.K
    Q = kit.fsol.P_inv
    inner = Q[i] @ (kit.mean_xi[i] - q) - Q[K] @ (kit.mean_xi[K] - kit.problem.v)
    return kit.A_nodes[i] @ q + kit.b_nodes[i] + ss @ Q[i].T @ np.linalg.solve(Mi, inner)


def sample_bridge_sde(kit: GaussianBridgeKit, noise: NoiseStream, pin: bool = True) -> Path:
    return Path(kit.grid, kit.sde_batch(noise.seed, [noise.path_index], noise.stream, pin)[0])


# --------------------------------------------------------------------------
# weights
# --------------------------------------------------------------------------


def case1_log_weight_batch(kit: GaussianBridgeKit, values: np.ndarray) -> np.ndarray:
    """Left-endpoint weight of the perturbation ``h`` for paths ``(n, K+1, d)``."""
    model = kit.model
    if model.h.is_zero:
        return np.zeros(values.shape[0])
    t = kit.grid.nodes[:-1]
    dt = kit.grid.dt
    P = values[:, :-1]
    resid = (values[:, 1:] - P
             - (np.einsum("kij,nkj->nki", kit.A_nodes[:-1], P) + kit.b_nodes[:-1]) * dt[:, None])
    H = model.h(t[None, :], P)
    drive = np.einsum("kmi,nki->nkm", kit.sigma_plus_nodes[:-1], resid)
    return np.einsum("nkm,nkm->n", H, drive) - 0.5 * np.einsum("nkm,nkm,k->n", H, H, dt)


def case1_log_weight(kit: GaussianBridgeKit, p: Path) -> float:
    if p.grid != kit.grid:
        raise InvalidArgument("path is not tabulated on the kit's grid")
    return float(case1_log_weight_batch(kit, p.values[None])[0])


# --------------------------------------------------------------------------
# integrated Brownian motion (position, velocity)
# --------------------------------------------------------------------------


def bridge2d_gain(t, T: float) -> np.ndarray:
    """``R(t, T) R(T, T)^{-1}`` for integrated Brownian motion, shape ``(..., 2, 2)``."""
    t = np.asarray(t, dtype=float)
    g = np.empty(t.shape + (2, 2))
    f = t / T**3
    g[..., 0, 0] = f * t * (3 * T - 2 * t)
    g[..., 0, 1] = -f * t * T * (T - t)
    g[..., 1, 0] = f * 6 * (T - t)
    g[..., 1, 1] = f * T * (3 * t - 2 * T)
    return g


def integrated_bm_batch(u, s: float, grid: TimeGrid, seed: int, path_ids, stream: int = 0):
    """Exact ``(z, z')`` with ``z' = u_2 + s w`` and ``z = u_1 + t u_2 + s int w``."""
    u = np.asarray(u, dtype=float)
    Z = normal_block(seed, path_ids, grid.K, 2, stream)
    dt = grid.dt
    dw = np.sqrt(dt) * Z[:, :, 0]
    # int over the step of (w_r - w_{t_i}) given the increment, plus independent part
    dJ = 0.5 * dt * dw + np.sqrt(dt**3 / 12.0) * Z[:, :, 1]
    n = Z.shape[0]
    w = np.zeros((n, grid.K + 1))
    w[:, 1:] = np.cumsum(dw, axis=1)
    iw = np.zeros((n, grid.K + 1))
    iw[:, 1:] = np.cumsum(w[:, :-1] * dt + dJ, axis=1)
    t = grid.nodes
    out = np.empty((n, grid.K + 1, 2))
    out[..., 0] = u[0] + t * u[1] + s * iw
    out[..., 1] = u[1] + s * w
    return out


def bridge2d_closed_batch(u, v, s: float, grid: TimeGrid, seed: int, path_ids, stream: int = 0):
    z = integrated_bm_batch(u, s, grid, seed, path_ids, stream)
    gain = bridge2d_gain(grid.nodes, grid.T)
    return z - np.tensordot(z[:, -1] - np.asarray(v, dtype=float), gain, axes=([1], [2]))


def bridge2d_closed_form(u, v, s: float, grid: TimeGrid, rng: NoiseStream) -> Path:
    """Exact integrated-Brownian bridge from ``u`` to ``v`` via the cubic correction."""
    return Path(grid, bridge2d_closed_batch(u, v, s, grid, rng.seed, [rng.path_index],
                                            rng.stream)[0])


def bridge2d_sde_drift(t: float, p, q, v, T: float):
    """Velocity drift ``-6 (p - v_1)/(T-t)^2 - 2 (2 q + v_2)/(T-t)``; position drift is ``q``."""
    if not t < T:
        raise InvalidArgument(f"drift is singular at t = {t} >= T = {T}")
    tau = T - t
    return -6.0 * (np.asarray(p) - v[0]) / tau**2 - 2.0 * (2.0 * np.asarray(q) + v[1]) / tau


def bridge2d_sde_batch(u, v, s: float, grid: TimeGrid, seed: int, path_ids, stream: int = 0,
                       pin: bool = True):
    """Euler paths of the integrated-Brownian bridge SDE."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    Z = normal_block(seed, path_ids, grid.K, 1, stream)[..., 0]
    t, dt = grid.nodes, grid.dt
    n = Z.shape[0]
    out = np.empty((n, grid.K + 1, 2))
    p = np.full(n, u[0])
    q = np.full(n, u[1])
    out[:, 0] = u
    for i in range(grid.K):
        a = bridge2d_sde_drift(t[i], p, q, v, grid.T)
        p, q = p + q * dt[i], q + a * dt[i] + s * np.sqrt(dt[i]) * Z[:, i]
        out[:, i + 1, 0] = p
        out[:, i + 1, 1] = q
    if pin:
        out[:, -1] = v
    return out


def integrated_bm_scale(model: LinearModel):
    """Velocity-noise scale ``s`` if ``model`` is integrated Brownian motion, else ``None``."""
    A = getattr(model.A, "constant", None)
    b = getattr(model.b, "constant", None)
    S = getattr(model.sigma, "constant", None)
    if model.d != 2 or model.m != 1 or A is None or b is None or S is None:
        return None
    if not np.array_equal(A, [[0, 1], [0, 0]]) or np.any(b) or S[0, 0] != 0 or S[1, 0] == 0:
        return None
    return float(S[1, 0])


def bridge2d_model(s: float, h=None) -> LinearModel:
    """Linear model of integrated Brownian motion with velocity noise ``s``."""
    return LinearModel([[0.0, 1.0], [0.0, 0.0]], [0.0, 0.0], [[0.0], [float(s)]], h=h,
                       sigma_plus=[[0.0, 1.0 / float(s)]])
