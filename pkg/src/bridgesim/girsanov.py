"""Log-weights for change-of-measure arguments on a time grid.

* :func:`girsanov_log_weight`: ``sum h . dw - 1/2 sum |h|^2 dt`` for a
  drift perturbation ``h`` of a driving Brownian motion.
* Pinned bridges of ``dy = b dt + sigma dw`` proposed by
  ``dy = [b] dt - (y - v)/(T - t) dt + sigma dw``, with ``A = sigma^{-T} sigma^{-1}``
  and ``ytil = y - v``:

  bounded drift (``b`` in the proposal)::

      -( sum_k ytil_{k-1}' A b (t_{k-1}) dt_k / (T - t_{k-1})
         + sum_{k<K} ytil_k' (A_k - A_{k-1}) ytil_k / (2 (T - t_k)) )

  unbounded drift (pure pull)::

      - sum_{k<K} ytil_k' (A_k - A_{k-1}) ytil_k / (2 (T - t_k))
      + sum_k (b' A)(t_{k-1}) dy_k - 1/2 sum_k |sigma^{-1} b|^2 dt_k

All sums use left endpoints.  ``ytil_K = 0`` on a pinned path, so the last
``dA`` summand vanishes and is skipped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BridgeProblem, GeneralModel, Path, TimeGrid, as_coefficient, check_sigma
from .errors import InvalidArgument

# multiplier of the pinning-rate diagnostic
PIN_RATE_CONSTANT = 10.0


@dataclass(frozen=True)
class Case2WeightBreakdown:
    """Pieces of a bridge log-weight; ``total`` is their signed sum."""

    term_drift: float
    term_dA: float
    term_ito_b: float
    term_quad_b: float
    total: float

    def to_dict(self):
        return {
            "term_drift": self.term_drift,
            "term_dA": self.term_dA,
            "term_ito_b": self.term_ito_b,
            "term_quad_b": self.term_quad_b,
            "total": self.total,
        }


# --------------------------------------------------------------------------
# plain Girsanov weight
# --------------------------------------------------------------------------


def girsanov_log_weight(h, path: Path, dw) -> float:
    """``sum_i h(t_i, x_i) . dw_i - 1/2 sum_i |h(t_i, x_i)|^2 dt_i``.

    Raises
    ------
    InvalidArgument
        If ``dw`` does not have one increment row per grid interval.
    """
    dw = np.asarray(dw, dtype=float)
    if dw.ndim == 1:
        dw = dw[:, None]
    if dw.shape[0] != path.grid.K:
        raise InvalidArgument(f"{dw.shape[0]} increments for a grid with {path.grid.K} intervals")
    return float(girsanov_log_weight_batch(h, path.grid, path.values[None], dw[None])[0])


def girsanov_log_weight_batch(h, grid: TimeGrid, values: np.ndarray, dW: np.ndarray) -> np.ndarray:
    """Vectorised :func:`girsanov_log_weight` over ``values`` ``(n, K+1, d)``."""
    d = values.shape[-1]
    m = dW.shape[-1]
    h = as_coefficient(h, (m,))
    if dW.shape[:2] != (values.shape[0], grid.K) or values.shape[1] != grid.K + 1:
        raise InvalidArgument("increments are not aligned with the path grid")
    t = grid.nodes[:-1]
    hv = h(t[None, :], values[:, :-1, :d])
    if hv.shape[-1] != m:
        raise InvalidArgument(f"h has {hv.shape[-1]} components, increments have {m}")
    ito = np.einsum("nkj,nkj->n", hv, dW)
    quad = 0.5 * np.einsum("nkj,nkj,k->n", hv, hv, grid.dt)
    return ito - quad


# --------------------------------------------------------------------------
# bridge drift and weights
# --------------------------------------------------------------------------


def case2_bridge_drift(model: GeneralModel, problem: BridgeProblem, t: float, y, include_b: bool):
    """Proposal drift ``[b(t, y)] - (y - v)/(T - t)``."""
    if not t < problem.T:
        raise InvalidArgument(f"bridge drift is singular at t = {t} >= T = {problem.T}")
    y = np.asarray(y, dtype=float)
    pull = -(y - problem.v) / (problem.T - t)
    if include_b:
        return model.b(t, y) + pull
    return pull


def _solve(S: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``S^{-1} y`` for stacks ``S`` ``(..., d, d)`` and ``y`` ``(..., d)``."""
    if S.shape[-1] == 1:
        return y / S[..., 0]
    return np.linalg.solve(S, y[..., None])[..., 0]


def case2_terms_batch(model: GeneralModel, problem: BridgeProblem, grid: TimeGrid,
                      values: np.ndarray, bounded: bool, blowup=None) -> dict:
    """Weight pieces for pinned paths ``values`` ``(n, K+1, d)``.

    Paths flagged in ``blowup`` (node index >= 0) are skipped and get zeros.
    """
    n = values.shape[0]
    t = grid.nodes
    dt = grid.dt
    tau = problem.T - t[:-1]
    out = {k: np.zeros(n) for k in ("term_drift", "term_dA", "term_ito_b", "term_quad_b")}
    ok = np.ones(n, dtype=bool) if blowup is None else np.asarray(blowup) < 0
    if not np.any(ok):
        return out
    Y = values[ok]
    yt = Y - problem.v
    S = model.sigma(t[None, :-1], Y[:, :-1])
    check_sigma(S)
    B = model.b(t[None, :-1], Y[:, :-1])
    z = _solve(S, yt[:, :-1])
    c = _solve(S, B)
    zp = _solve(S[:, :-1], yt[:, 1:-1])
    dA = (np.sum(z[:, 1:] ** 2, axis=-1) - np.sum(zp ** 2, axis=-1)) / (2.0 * tau[1:])
    out["term_dA"][ok] = dA.sum(axis=1)
    if bounded:
        out["term_drift"][ok] = np.sum(np.sum(z * c, axis=-1) * (dt / tau), axis=1)
    else:
        zdy = _solve(S, np.diff(Y, axis=1))
        out["term_ito_b"][ok] = np.sum(np.sum(c * zdy, axis=-1), axis=1)
        out["term_quad_b"][ok] = -0.5 * np.sum(np.sum(c * c, axis=-1) * dt, axis=1)
    return out


def combine_terms(pieces: dict, bounded: bool):
    """Signed sum of the weight pieces (scalars or arrays)."""
    if bounded:
        return -(pieces["term_drift"] + pieces["term_dA"])
    return -pieces["term_dA"] + pieces["term_ito_b"] + pieces["term_quad_b"]


def _single(model, problem, y: Path, bounded: bool) -> Case2WeightBreakdown:
    if y.d != problem.d:
        raise InvalidArgument("path dimension does not match the bridge problem")
    if np.any(y.values[-1] != problem.v):
        raise InvalidArgument("path is not pinned at the target (y_T != v)")
    if abs(y.grid.T - problem.T) > 1e-12 * max(1.0, problem.T):
        raise InvalidArgument("path grid does not end at the bridge horizon")
    pieces = {k: float(a[0]) for k, a in
              case2_terms_batch(model, problem, y.grid, y.values[None], bounded).items()}
    return Case2WeightBreakdown(total=float(combine_terms(pieces, bounded)), **pieces)


def case2_bounded_log_weight(model: GeneralModel, problem: BridgeProblem, y: Path
                             ) -> Case2WeightBreakdown:
    """Log-weight of a pinned bridge proposed with the drift ``b`` included."""
    return _single(model, problem, y, bounded=True)


def case2_unbounded_log_weight(model: GeneralModel, problem: BridgeProblem, y: Path
                               ) -> Case2WeightBreakdown:
    """Log-weight of a pinned bridge proposed by the pure pull toward ``v``."""
    return _single(model, problem, y, bounded=False)


def pinning_threshold(grid: TimeGrid, v) -> float:
    """Largest pre-pinning endpoint deviation considered consistent with the
    ``sqrt((T - t) log log(1/(T - t) + e))`` approach rate."""
    mesh = grid.mesh()
    rate = np.sqrt(mesh * np.log(np.log(1.0 / mesh + np.e)))
    return float(PIN_RATE_CONSTANT * rate * (1.0 + np.linalg.norm(np.atleast_1d(v))))
