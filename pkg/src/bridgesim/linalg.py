"""Deterministic matrix machinery for linear models.

Fundamental matrix ``P_t`` (and its inverse), the accumulated covariance
integral ``G(t) = int_0^t P_u^{-1} sigma sigma^T P_u^{-T} du``, the derived
covariance ``R(s, t)`` and Gramian ``M(t)``, and a left pseudo-inverse that
zeroes reciprocals of numerically null eigenvalues.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import LinearModel, TimeGrid
from .errors import EvaluationError, InvalidArgument


def left_pinv(M) -> np.ndarray:
    """Left pseudo-inverse ``(M^T M)^+ M^T``.

    ``M^T M`` is inverted through its symmetric eigendecomposition; eigenvalues
    at or below ``n * eps * lambda_max`` (``n`` = number of rows) are treated
    as zero and their reciprocals set to zero.  The eigenpairs are read off the
    SVD of ``M`` so that ``M^T M`` is never formed.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    n = M.shape[0]
    # the cutoff is relative; scaling only guards s^2 against under/overflow
    scale = np.abs(M).max() if M.size else 0.0
    if scale == 0.0:
        return np.zeros(M.shape[::-1])
    Ms = M / scale
    # eigenpairs of Ms^T Ms taken from the SVD of Ms: lambda = s^2, same eigenvectors,
    # without squaring the condition number
    U, sv, Vt = np.linalg.svd(Ms, full_matrices=False)
    lam = sv * sv
    tau = n * np.finfo(float).eps * (lam[0] if lam.size else 0.0)
    keep = lam > tau
    inv_s = np.zeros_like(sv)
    inv_s[keep] = 1.0 / sv[keep]
    # (V diag(1/lam) V^T) M^T = V diag(1/s) U^T on the kept part
    return (Vt.T * inv_s) @ U.T / scale


@dataclass(frozen=True, eq=False)
class FundamentalSolution:
    """``P_t`` and ``P_t^{-1}`` tabulated on a grid, arrays of shape ``(K+1, d, d)``."""

    grid: TimeGrid
    P: np.ndarray
    P_inv: np.ndarray


def _eval_A(A, t):
    a = np.atleast_2d(np.asarray(A(t), dtype=float))
    if not np.all(np.isfinite(a)):
        raise EvaluationError(f"A({t}) is not finite")
    return a


def fundamental_matrix(A: Callable, grid: TimeGrid) -> FundamentalSolution:
    """Integrate ``dP/dt = A P`` and ``dQ/dt = -Q A`` (``Q = P^{-1}``) with RK4.

    One classical Runge-Kutta step per grid interval; both start from the
    identity.
    """
    t = grid.nodes
    d = _eval_A(A, t[0]).shape[0]
    P = np.empty((t.size, d, d))
    Q = np.empty((t.size, d, d))
    P[0] = Q[0] = np.eye(d)
    a0 = _eval_A(A, t[0])
    for i in range(grid.K):
        h = t[i + 1] - t[i]
        am = _eval_A(A, t[i] + 0.5 * h)
        a1 = _eval_A(A, t[i + 1])
        p, q = P[i], Q[i]
        k1, l1 = a0 @ p, -q @ a0
        k2, l2 = am @ (p + 0.5 * h * k1), -(q + 0.5 * h * l1) @ am
        k3, l3 = am @ (p + 0.5 * h * k2), -(q + 0.5 * h * l2) @ am
        k4, l4 = a1 @ (p + h * k3), -(q + h * l3) @ a1
        P[i + 1] = p + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        Q[i + 1] = q + h / 6.0 * (l1 + 2 * l2 + 2 * l3 + l4)
        a0 = a1
    P.setflags(write=False)
    Q.setflags(write=False)
    return FundamentalSolution(grid, P, Q)


@dataclass(frozen=True, eq=False)
class CovarianceTable:
    """Cumulative covariance integral ``G`` at every node, with the flow it used.

    ``R(s, t) = P_s G(min(s, t)) P_t^T`` and ``M(t) = G(T) - G(t)``.
    """

    grid: TimeGrid
    G: np.ndarray
    fsol: FundamentalSolution

    def index(self, t: float) -> int:
        return self.grid.index_of(t)

    def R(self, s: float, t: float) -> np.ndarray:
        i, j = self.index(s), self.index(t)
        return self.R_index(i, j)

    def R_index(self, i: int, j: int) -> np.ndarray:
        P = self.fsol.P
        return P[i] @ self.G[min(i, j)] @ P[j].T

    def M(self, t: float) -> np.ndarray:
        return self.M_index(self.index(t))

    def M_index(self, i: int) -> np.ndarray:
        return self.G[-1] - self.G[i]


def covariance_table(model: LinearModel, grid: TimeGrid, fsol: FundamentalSolution | None = None
                     ) -> CovarianceTable:
    """Trapezoidal accumulation of ``P_u^{-1} sigma_u sigma_u^T P_u^{-T}`` on ``grid``."""
    if fsol is None:
        fsol = fundamental_matrix(model.A, grid)
    t = grid.nodes
    integrand = np.empty((t.size, model.d, model.d))
    for i, ti in enumerate(t):
        s = np.asarray(model.sigma(ti), dtype=float).reshape(model.d, model.m)
        if not np.all(np.isfinite(s)):
            raise EvaluationError(f"sigma({ti}) is not finite")
        w = fsol.P_inv[i] @ s
        integrand[i] = w @ w.T
    G = np.zeros_like(integrand)
    dt = grid.dt[:, None, None]
    G[1:] = np.cumsum(0.5 * dt * (integrand[:-1] + integrand[1:]), axis=0)
    G.setflags(write=False)
    return CovarianceTable(grid, G, fsol)


def R(s: float, t: float, table: CovarianceTable) -> np.ndarray:
    """Covariance ``Cov(xi_s, xi_t)`` of the unperturbed linear process; nodes only."""
    return table.R(s, t)


def M(t: float, table: CovarianceTable) -> np.ndarray:
    """Gramian ``int_t^T P_u^{-1} sigma sigma^T P_u^{-T} du``; nodes only."""
    return table.M(t)


@dataclass(frozen=True)
class ControllabilityReport:
    min_eigenvalue: float
    at_time: float
    tol: float
    relative: bool
    passed: bool

    def to_dict(self):
        return {
            "min_eigenvalue": self.min_eigenvalue,
            "at_time": self.at_time,
            "tol": self.tol,
            "relative": self.relative,
            "passed": self.passed,
        }


# default scale-free positive-definiteness threshold for M(t)
CONTROLLABILITY_RTOL = 1e-10


def check_controllable(table: CovarianceTable, tol: float | None = None) -> ControllabilityReport:
    """Smallest eigenvalue of ``M(t_i)`` over the nodes ``t_1 .. t_{K-1}``.

    With an explicit ``tol`` the minimum eigenvalue must exceed it.  Without
    one, every node must satisfy ``lambda_min(M) > 1e-10 * trace(M)``, which
    stays meaningful when ``M(t)`` shrinks at different rates per direction.
    """
    lam_min = np.inf
    at = 0.0
    ok = True
    for i in range(1, table.grid.K):
        Mi = table.M_index(i)
        lam = np.linalg.eigvalsh(0.5 * (Mi + Mi.T))
        if lam[0] < lam_min:
            lam_min, at = float(lam[0]), float(table.grid.nodes[i])
        if tol is None and not lam[0] > CONTROLLABILITY_RTOL * max(np.trace(Mi), 0.0):
            ok = False
        if tol is None and np.trace(Mi) <= 0:
            ok = False
    if tol is not None:
        ok = lam_min > tol
        return ControllabilityReport(lam_min, at, float(tol), False, bool(ok))
    return ControllabilityReport(lam_min, at, CONTROLLABILITY_RTOL, True, bool(ok))


def is_node(grid: TimeGrid, t: float) -> bool:
    try:
        grid.index_of(t)
    except InvalidArgument:
        return False
    return True
