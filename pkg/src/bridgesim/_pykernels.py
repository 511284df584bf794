"""Pure numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or explicitly disabled.
Paths are advanced one time step at a time, vectorised across paths.
"""

from __future__ import annotations

import numpy as np

from . import expr as E
from .errors import EvaluationError

BLOWUP_BOUND = 1e8

_UNARY = {E.OP_SIN: np.sin, E.OP_COS: np.cos, E.OP_EXP: np.exp,
          E.OP_TANH: np.tanh, E.OP_ABS: np.abs}


def eval_program(ps: E.ProgramSet, j: int, t, X) -> np.ndarray:
    """Run program ``j`` of ``ps`` at times ``t`` (scalar or ``(n,)``) and states ``X`` ``(n, d)``."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=float) + ps.t_offset, (n,))
    stack = []
    with np.errstate(all="ignore"):
        for op, arg in ps.code[ps.offsets[j]:ps.offsets[j + 1]]:
            if op == E.OP_CONST:
                stack.append(np.full(n, ps.consts[arg]))
            elif op == E.OP_T:
                stack.append(t)
            elif op == E.OP_X:
                stack.append(X[:, arg])
            elif op == E.OP_NEG:
                stack.append(-stack.pop())
            elif op in _UNARY:
                stack.append(_UNARY[op](stack.pop()))
            elif op == E.OP_LOG:
                a = stack.pop()
                if np.any(a <= 0):
                    raise EvaluationError(E.ERROR_MESSAGES[E.ERR_LOG])
                stack.append(np.log(a))
            elif op == E.OP_SQRT:
                a = stack.pop()
                if np.any(a < 0):
                    raise EvaluationError(E.ERROR_MESSAGES[E.ERR_SQRT])
                stack.append(np.sqrt(a))
            else:
                b = stack.pop()
                a = stack.pop()
                if op == E.OP_ADD:
                    r = a + b
                elif op == E.OP_SUB:
                    r = a - b
                elif op == E.OP_MUL:
                    r = a * b
                elif op == E.OP_DIV:
                    if np.any(b == 0):
                        raise EvaluationError(E.ERROR_MESSAGES[E.ERR_DIV])
                    r = a / b
                elif op == E.OP_POW:
                    r = np.power(a, b)
                    if np.any(((a == 0) & (b < 0)) | np.isnan(r)):
                        raise EvaluationError(E.ERROR_MESSAGES[E.ERR_POW])
                elif op == E.OP_MIN:
                    r = np.minimum(a, b)
                else:
                    r = np.maximum(a, b)
                stack.append(r)
    out = np.array(stack[-1], dtype=float)
    if np.any(np.isnan(out)):
        raise EvaluationError(E.ERROR_MESSAGES[E.ERR_NAN])
    return out


def euler_paths(drift, diffusion, dW, times, x0, v=None, bridge=False, pin=False):
    """Euler-Maruyama over a block of paths.

    Parameters
    ----------
    drift, diffusion : callable or None
        ``drift(t, X) -> (n, d)`` and ``diffusion(t, X) -> (n, d, m)`` at a
        scalar time; ``drift=None`` means zero drift.
    dW : ndarray, shape (n, K, m)
        Brownian increments already scaled by ``sqrt(dt)``.
    v : ndarray, optional
        Target for the bridge pull ``-(x - v)/(T - t)`` and for pinning.

    Returns
    -------
    values : (n, K+1, d) array
    prepin : (n,) distance of the un-pinned endpoint to ``v`` (0 if unpinned)
    blowup : (n,) int, first node index that blew up, -1 if none
    """
    n, K, _ = dW.shape
    x0 = np.asarray(x0, dtype=float)
    d = x0.shape[-1]
    T = times[-1]
    values = np.empty((n, K + 1, d))
    values[:, 0] = x0
    blowup = np.full(n, -1, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    prepin = np.zeros(n)
    x = values[:, 0].copy()
    for k in range(K):
        t = times[k]
        h = times[k + 1] - t
        step = np.einsum("nij,nj->ni", diffusion(t, x), dW[:, k])
        if drift is not None:
            step += drift(t, x) * h
        if bridge:
            step -= (x - v) * (h / (T - t))
        with np.errstate(all="ignore"):
            xn = x + step
            bad = alive & ~np.all(np.isfinite(xn) & (np.abs(xn) <= BLOWUP_BOUND), axis=1)
        if np.any(bad):
            blowup[bad] = k + 1
            alive &= ~bad
        if not np.all(alive):
            xn[~alive] = x[~alive]
        if pin and k == K - 1:
            prepin = np.where(alive, np.linalg.norm(xn - v, axis=1), 0.0)
            xn[alive] = v
        values[:, k + 1] = xn
        x = xn
    return values, prepin, blowup
