"""Euler-Maruyama integration with reproducible, counter-based noise.

Every path draws its Gaussian increments from its own Philox stream keyed by
``(seed, path_index)``, so a path never depends on which worker produced it
or on how the batch was chunked.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _backend
from . import _pykernels
from . import expr as E
from .core import (
    BridgeProblem, CoefficientFn, ConstantCoefficient, GeneralModel, Path, PathBatch,
    TimeGrid, WeightedSample, as_coefficient,
)
from .errors import BlowupError, EvaluationError, InvalidArgument, NumericError

log = logging.getLogger("bridgesim")

SEED_MAX = 2**64 - 1

# target number of doubles held per chunk of paths
CHUNK_FLOATS = 8_000_000
CHUNK_MIN, CHUNK_MAX = 256, 8192


# --------------------------------------------------------------------------
# noise
# --------------------------------------------------------------------------


def _check_seed(seed) -> int:
    seed = int(seed)
    if not 0 <= seed <= SEED_MAX:
        raise InvalidArgument(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def _bitgen(seed: int, path_index: int, stream: int) -> np.random.Philox:
    if path_index < 0 or stream < 0:
        raise InvalidArgument("path index and stream must be non-negative")
    return np.random.Philox(key=seed | (int(path_index) << 64), counter=int(stream) << 192)


def _generator(seed: int, path_index: int, stream: int) -> np.random.Generator:
    return np.random.Generator(_bitgen(seed, path_index, stream))


def _check_ids(path_ids) -> np.ndarray:
    ids = np.ascontiguousarray(path_ids, dtype=np.int64)
    if ids.size and ids.min() < 0:
        raise InvalidArgument("path indices must be non-negative")
    return ids


def _check_stream(stream) -> int:
    stream = int(stream)
    if not 0 <= stream <= SEED_MAX:
        raise InvalidArgument("stream must be an unsigned 64-bit integer")
    return stream


@dataclass(frozen=True)
class NoiseStream:
    """Gaussian increments for one path, keyed by ``(seed, path_index, stream)``.

    ``stream`` separates independent uses of the same path index (for
    example the segments of a multi-observation posterior path).
    """

    seed: int
    path_index: int
    stream: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", _check_seed(self.seed))

    def normals(self, K: int, m: int) -> np.ndarray:
        """Standard normals of shape ``(K, m)``; row ``k`` belongs to interval ``k``."""
        return _generator(self.seed, self.path_index, self.stream).standard_normal((K, m))

    def increments(self, grid: TimeGrid, m: int) -> np.ndarray:
        """Brownian increments ``sqrt(dt_k) Z_k`` of shape ``(K, m)``."""
        return self.normals(grid.K, m) * np.sqrt(grid.dt)[:, None]


def normal_block(seed: int, path_ids, K: int, m: int, stream: int = 0) -> np.ndarray:
    """Stack the per-path standard normals of ``path_ids`` into ``(n, K, m)``."""
    seed = _check_seed(seed)
    path_ids = _check_ids(path_ids)
    if _backend.use_compiled(None):
        return _backend.compiled().normal_fill(seed, path_ids, _check_stream(stream), K, m)
    out = np.empty((path_ids.size, K, m))
    for i, p in enumerate(path_ids):
        _generator(seed, int(p), stream).standard_normal((K, m), out=out[i])
    return out


def increment_block(seed: int, path_ids, grid: TimeGrid, m: int, stream: int = 0) -> np.ndarray:
    dW = normal_block(seed, path_ids, grid.K, m, stream)
    dW *= np.sqrt(grid.dt)[None, :, None]
    return dW


# --------------------------------------------------------------------------
# chunked execution
# --------------------------------------------------------------------------


def resolve_threads(threads: int | None) -> int:
    """``0`` or ``None`` means one worker per available CPU."""
    if not threads:
        try:
            return max(1, len(os.sched_getaffinity(0)))
        except AttributeError:  # pragma: no cover - non-Linux
            return os.cpu_count() or 1
    if threads < 0:
        raise InvalidArgument("thread count must be >= 0")
    return int(threads)


def default_chunk_size(K: int, width: int) -> int:
    per_path = (K + 1) * max(width, 1) * 3
    return int(np.clip(CHUNK_FLOATS // per_path, CHUNK_MIN, CHUNK_MAX))


def run_chunked(work: Callable, n_paths: int, chunk_size: int, threads: int | None = 1,
                first_id: int = 0, ordered: bool = True) -> list:
    """Apply ``work(path_ids)`` to consecutive id blocks.

    Blocks may run concurrently on a thread pool; because each path carries
    its own noise stream, each block's result does not depend on the
    schedule.  Results come back in block order, or in completion order when
    ``ordered`` is false.
    """
    if n_paths < 1:
        raise InvalidArgument("need at least one path")
    starts = range(first_id, first_id + n_paths, chunk_size)
    blocks = [np.arange(s, min(s + chunk_size, first_id + n_paths)) for s in starts]
    workers = min(resolve_threads(threads), len(blocks))
    if workers <= 1:
        return [work(ids) for ids in blocks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        if ordered:
            return list(pool.map(work, blocks))
        futures = [pool.submit(work, ids) for ids in blocks]
        return [fut.result() for fut in as_completed(futures)]


# --------------------------------------------------------------------------
# single-path Euler
# --------------------------------------------------------------------------


def euler(drift, diffusion, x0, grid: TimeGrid, noise: NoiseStream, pin=None):
    """Euler-Maruyama for a single path.

    Parameters
    ----------
    drift : CoefficientFn or callable ``(t, x) -> (d,)``
    diffusion : CoefficientFn or callable ``(t, x) -> (d, m)``
    x0 : array_like, shape (d,)
    grid : TimeGrid
    noise : NoiseStream
    pin : array_like, optional
        When given, the last value is overwritten with ``pin``; the drift is
        then never evaluated at ``T``.

    Returns
    -------
    path : Path
    dw : ndarray, shape (K, m)
        The Brownian increments that drove the path.

    Raises
    ------
    BlowupError
        If the state leaves ``|x| <= 1e8`` or becomes non-finite.
    """
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    d = x.size
    drift = drift if isinstance(drift, CoefficientFn) else as_coefficient(drift, (d,))
    s0 = np.asarray(diffusion(0.0, x) if callable(diffusion) else diffusion, dtype=float)
    m = 1 if s0.ndim < 2 else s0.shape[-1]
    if not isinstance(diffusion, CoefficientFn):
        diffusion = as_coefficient(diffusion, (d, m))
    dw = noise.increments(grid, m)
    t = grid.nodes
    values = np.empty((grid.K + 1, d))
    values[0] = x
    for k in range(grid.K):
        h = t[k + 1] - t[k]
        s = np.asarray(diffusion(t[k], x), dtype=float).reshape(d, m)
        with np.errstate(all="ignore"):
            xn = x + np.asarray(drift(t[k], x), dtype=float) * h + s @ dw[k]
        if not np.all(np.isfinite(xn) & (np.abs(xn) <= _pykernels.BLOWUP_BOUND)):
            raise BlowupError(f"path blew up at t = {t[k + 1]:.6g}", time=float(t[k + 1]))
        x = xn
        values[k + 1] = x
    if pin is not None:
        values[-1] = np.asarray(pin, dtype=float)
    return Path(grid, values), dw


# --------------------------------------------------------------------------
# compiled-program plumbing
# --------------------------------------------------------------------------


def _as_expr(coef, dim: int):
    """An :class:`ExprCoefficient` equivalent to ``coef``, or ``None``."""
    if isinstance(coef, E.ExprCoefficient):
        return coef
    if isinstance(coef, ConstantCoefficient):
        return E.ExprCoefficient(coef.value.tolist(), dim)
    return None


def program_set(coefs, dim: int):
    """Merge the programs of several coefficients, or ``None`` if any is opaque."""
    exprs = [_as_expr(c, dim) for c in coefs]
    if any(e is None for e in exprs):
        return None
    offsets = {e.t_offset for e in exprs if not e.is_constant}
    t_offset = offsets.pop() if len(offsets) == 1 else 0.0
    if offsets:
        return None
    sets = []
    for e in exprs:
        ps = e.programs()
        if e.is_constant:
            ps = E.ProgramSet(ps.code, ps.offsets, ps.consts, ps.max_stack, ps.dim, t_offset)
        sets.append(ps)
    return E.merge_programs(*sets)


def _raise_kernel_error(err: int, path_id):
    if err == E.ERR_SIGMA:
        raise NumericError(f"{E.ERROR_MESSAGES[err]} (path {path_id})")
    raise EvaluationError(f"{E.ERROR_MESSAGES[err]} (path {path_id})")


def _run_compiled(ps, d, m, has_drift, has_h, grid, x0, v, bridge, include_b, pin,
                  weight_mode, seed, path_ids, stream, dW=None, record_dw=False, record=None):
    """Run the fused kernel; noise is drawn in-kernel unless ``dW`` is given."""
    ck = _backend.compiled()
    values, prepin, blowup, terms, err, err_path, dw = ck.euler_program(
        ps.code, ps.offsets, ps.consts, ps.max_stack, ps.t_offset, d, m,
        has_drift, has_h, np.ascontiguousarray(grid.nodes), np.asarray(x0, dtype=float),
        np.zeros(d) if v is None else np.asarray(v, dtype=float),
        bridge, include_b, pin, weight_mode, dW=dW, seed=_check_seed(seed),
        path_ids=_check_ids(path_ids), stream=_check_stream(stream), record_dw=record_dw,
        record=record,
    )
    if err:
        _raise_kernel_error(err, path_ids[err_path])
    return values, prepin, blowup, terms, dw


WEIGHT_NONE, WEIGHT_BOUNDED, WEIGHT_UNBOUNDED, WEIGHT_GIRSANOV = 0, 1, 2, 3


# --------------------------------------------------------------------------
# case-2 bridges
# --------------------------------------------------------------------------


def _check_problem(model: GeneralModel, problem: BridgeProblem, grid: TimeGrid):
    if problem.d != model.d:
        raise InvalidArgument(f"problem dimension {problem.d} != model dimension {model.d}")
    if abs(grid.T - problem.T) > 1e-12 * max(1.0, problem.T):
        raise InvalidArgument(f"grid ends at {grid.T} but the horizon is {problem.T}")


def case2_bridge_batch(model: GeneralModel, problem: BridgeProblem, grid: TimeGrid, seed: int,
                       path_ids, include_b: bool, stream: int = 0, compiled=None) -> PathBatch:
    """Pinned Euler bridges with their log-weights for a block of path ids.

    ``include_b=True`` integrates ``b - (y - v)/(T - t)`` and attaches the
    bounded-drift weight; ``include_b=False`` integrates the pure pull and
    attaches the unbounded-drift weight.  Paths that blow up get weight
    ``-inf`` and are frozen at their last finite value.

    ``extras`` holds ``prepin`` (endpoint deviation before pinning),
    ``blowup`` (node index or -1) and the weight pieces ``term_*``.
    """
    from . import girsanov

    _check_problem(model, problem, grid)
    path_ids = np.asarray(path_ids, dtype=np.int64)
    d = model.d
    mode = WEIGHT_BOUNDED if include_b else WEIGHT_UNBOUNDED
    ps = program_set([model.b, model.sigma], d) if _backend.use_compiled(compiled) else None
    if ps is not None:
        values, prepin, blowup, terms, _ = _run_compiled(
            ps, d, d, True, False, grid, problem.u, problem.v, True, include_b, True,
            mode, seed, path_ids, stream)
        pieces = {"term_drift": terms[:, 0], "term_dA": terms[:, 1],
                  "term_ito_b": terms[:, 2], "term_quad_b": terms[:, 3]}
    else:
        dW = increment_block(seed, path_ids, grid, d, stream)
        drift = (lambda t, X: model.b(t, X)) if include_b else None
        values, prepin, blowup = _pykernels.euler_paths(
            drift, model.sigma, dW, grid.nodes, problem.u, problem.v, bridge=True, pin=True)
        pieces = girsanov.case2_terms_batch(model, problem, grid, values, bounded=include_b,
                                            blowup=blowup)
    total = girsanov.combine_terms(pieces, bounded=include_b)
    total = np.where(blowup >= 0, -np.inf, total)
    extras = dict(pieces)
    extras["prepin"] = prepin
    extras["blowup"] = blowup
    return PathBatch(grid, values, total, path_ids, extras)


def sample_case2_bridge(model: GeneralModel, problem: BridgeProblem, grid: TimeGrid,
                        noise: NoiseStream, include_b: bool, compiled=None) -> WeightedSample:
    """One pinned bridge with its weight; raises :class:`BlowupError` on blow-up."""
    batch = case2_bridge_batch(model, problem, grid, noise.seed, [noise.path_index], include_b,
                               noise.stream, compiled)
    b = int(batch.extras["blowup"][0])
    if b >= 0:
        t = float(grid.nodes[b])
        raise BlowupError(f"bridge blew up at t = {t:.6g}", time=t)
    return batch.sample(0)


# --------------------------------------------------------------------------
# unconditioned paths
# --------------------------------------------------------------------------


def recorded_grid(grid: TimeGrid, nodes) -> tuple:
    """Sorted node indices including both endpoints, and the grid they span."""
    idx = sorted({0, grid.K} | {int(i) for i in nodes})
    if len(idx) < 3:
        idx = sorted(set(idx) | {grid.K // 2})
    idx = np.asarray(idx, dtype=np.int64)
    return idx, TimeGrid(grid.nodes[idx])


def forward_batch(model: GeneralModel, u, grid: TimeGrid, seed: int, path_ids, h=None,
                  stream: int = 0, compiled=None, record=None) -> PathBatch:
    """Unconditioned Euler paths of ``dx = b dt + sigma dw`` from ``u``.

    With ``h`` given, each path carries the Girsanov log-weight
    ``sum h . dw - 1/2 sum |h|^2 dt``; otherwise weights are zero.
    Blown-up paths get weight ``-inf``.

    ``record`` (node indices) keeps only those nodes plus both endpoints;
    the batch's grid is then the corresponding coarse grid.
    """
    from . import girsanov

    path_ids = np.asarray(path_ids, dtype=np.int64)
    d = model.d
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape != (d,):
        raise InvalidArgument(f"start value must have length {d}")
    if h is not None:
        h = as_coefficient(h, (d,))
    coefs = [model.b, model.sigma] + ([h] if h is not None else [])
    ps = program_set(coefs, d) if _backend.use_compiled(compiled) else None
    idx, out_grid = (None, grid) if record is None else recorded_grid(grid, record)
    if ps is not None:
        values, _, blowup, terms, _ = _run_compiled(
            ps, d, d, True, h is not None, grid, u, None, False, True, False,
            WEIGHT_GIRSANOV if h is not None else WEIGHT_NONE, seed, path_ids, stream,
            record=idx)
        lw = terms[:, 2] + terms[:, 3]
    else:
        dW = increment_block(seed, path_ids, grid, d, stream)
        values, _, blowup = _pykernels.euler_paths(
            lambda t, X: model.b(t, X), model.sigma, dW, grid.nodes, u)
        lw = np.zeros(len(path_ids))
        if h is not None:
            lw = girsanov.girsanov_log_weight_batch(h, grid, values, dW)
        if idx is not None:
            values = np.ascontiguousarray(values[:, idx])
    lw = np.where(blowup >= 0, -np.inf, lw)
    return PathBatch(out_grid, values, lw, path_ids, {"blowup": blowup})


def euler_batch(drift, diffusion, x0, grid: TimeGrid, seed: int, path_ids, m: int = None,
                pin=None, stream: int = 0):
    """Vectorised counterpart of :func:`euler` for callable coefficients.

    Returns ``(values, dW, blowup)``; blown-up paths are frozen.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = x0.size
    drift = as_coefficient(drift, (d,))
    if m is None:
        m = np.asarray(diffusion(0.0, x0[None]) if callable(diffusion) else diffusion).shape[-1]
    diffusion = as_coefficient(diffusion, (d, m))
    dW = increment_block(seed, path_ids, grid, m, stream)
    values, _, blowup = _pykernels.euler_paths(drift, diffusion, dW, grid.nodes, x0)
    if pin is not None:
        ok = blowup < 0
        values[ok, -1] = np.asarray(pin, dtype=float)
    return values, dW, blowup


def batches_to_samples(batches: Sequence[PathBatch]) -> list:
    out = []
    for b in batches:
        out.extend(b)
    return out
