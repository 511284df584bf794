"""Self-normalised importance sampling, weight diagnostics and posterior paths.

Weights are only known up to a constant factor, so every estimate is a ratio
``sum w f / sum w`` computed from log-weights shifted by their maximum.
Paths with log-weight ``-inf`` (blow-ups) count towards ``n_paths`` but carry
no weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import (
    BridgeProblem, GeneralModel, LinearModel, Path, PathBatch, TimeGrid, WeightedSample,
    make_uniform_grid,
)
from .errors import EstimationError, InvalidArgument


@dataclass
class ISResult:
    """Outcome of a self-normalised estimate.

    ``estimate`` and ``std_error`` are floats for scalar functionals and
    arrays for vector ones.
    """

    estimate: object
    std_error: object
    ess: float
    n_paths: int
    n_degenerate: int

    def to_dict(self):
        def conv(a):
            a = np.asarray(a, dtype=float)
            return float(a) if a.ndim == 0 else a.tolist()

        return {
            "estimate": conv(self.estimate),
            "std_error": conv(self.std_error),
            "ess": float(self.ess),
            "n_paths": int(self.n_paths),
            "n_degenerate": int(self.n_degenerate),
        }


# --------------------------------------------------------------------------
# path functionals
# --------------------------------------------------------------------------


class PathFunctional:
    """A map from paths to numbers, evaluated on stacks ``(n, K+1, d)``."""

    def batch(self, values: np.ndarray, grid: TimeGrid) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def __call__(self, path: Path):
        return self.batch(path.values[None], path.grid)[0]

    def nodes(self, grid: TimeGrid):
        """Node indices the functional reads, or ``None`` for the whole path."""
        return None


class _Terminal(PathFunctional):
    def __init__(self, coord: int):
        self.coord = coord

    def batch(self, values, grid):
        return values[:, -1, self.coord]

    def nodes(self, grid):
        return [grid.K]

    def __repr__(self):
        return f"terminal(x{self.coord + 1})"


class _CoordinateAt(PathFunctional):
    def __init__(self, t: float, coord: int):
        self.t = float(t)
        self.coord = coord

    def batch(self, values, grid):
        return values[:, grid.index_of(self.t), self.coord]

    def nodes(self, grid):
        return [grid.index_of(self.t)]

    def __repr__(self):
        return f"x{self.coord + 1}({self.t:g})"


class _PathIntegral(PathFunctional):
    def __init__(self, g):
        self.g = g

    def batch(self, values, grid):
        gv = np.asarray(self.g(grid.nodes[None, :], values), dtype=float)
        return np.sum(0.5 * (gv[:, :-1] + gv[:, 1:]) * grid.dt, axis=1)

    def __repr__(self):
        return f"integral({self.g!r})"


class _Callable(PathFunctional):
    def __init__(self, fn):
        self.fn = fn

    def batch(self, values, grid):
        return np.array([self.fn(Path(grid, v)) for v in values], dtype=float)


def terminal(coord: int = 0) -> PathFunctional:
    """``f(x) = x_T[coord]`` (zero-based coordinate)."""
    return _Terminal(int(coord))


def coordinate_at(t: float, coord: int = 0) -> PathFunctional:
    """``f(x) = x_t[coord]``; ``t`` must be a node of the path's grid."""
    return _CoordinateAt(t, int(coord))


def path_integral(g) -> PathFunctional:
    """Trapezoidal ``int_0^T g(t, x_t) dt``; ``g`` is a scalar coefficient."""
    return _PathIntegral(g)


def as_functional(f) -> PathFunctional:
    return f if isinstance(f, PathFunctional) else _Callable(f)


# --------------------------------------------------------------------------
# estimators
# --------------------------------------------------------------------------


def weighted_estimate(fvals, log_weights) -> ISResult:
    """Self-normalised estimate from per-path values and log-weights.

    Parameters
    ----------
    fvals : array_like, shape (n,) or (n, k)
    log_weights : array_like, shape (n,)
        ``-inf`` marks a degenerate path.
    """
    lw = np.asarray(log_weights, dtype=float)
    fv = np.asarray(fvals, dtype=float)
    n = lw.size
    if fv.shape[0] != n:
        raise InvalidArgument("values and log-weights differ in length")
    if np.any(np.isnan(lw)) or np.any(lw == np.inf):
        raise InvalidArgument("log-weights must be finite or -inf")
    ok = np.isfinite(lw)
    n_deg = int(n - ok.sum())
    if not np.any(ok):
        raise EstimationError("every sample has a degenerate (-inf) weight")
    w = np.exp(lw[ok] - lw[ok].max())
    f = fv[ok]
    sw = w.sum()
    wn = w / sw
    est = np.tensordot(wn, f, axes=1)
    resid = f - est
    se = np.sqrt(np.tensordot(wn**2, resid**2, axes=1))
    ess = float(sw**2 / np.sum(w**2))
    return ISResult(_scalar(est), _scalar(se), ess, n, n_deg)


def _scalar(a):
    a = np.asarray(a, dtype=float)
    return float(a) if a.ndim == 0 else a


def self_normalized_estimate(f, samples) -> ISResult:
    """Estimate ``E[f(x) | x_T = v]`` from weighted bridge samples.

    ``samples`` may be a list of :class:`WeightedSample` or of
    :class:`PathBatch` (or a single batch).
    """
    f = as_functional(f)
    if isinstance(samples, PathBatch):
        samples = [samples]
    samples = list(samples)
    if not samples:
        raise EstimationError("no samples")
    if isinstance(samples[0], PathBatch):
        fv = np.concatenate([f.batch(b.values, b.grid) for b in samples])
        lw = np.concatenate([b.log_weights for b in samples])
    else:
        fv = np.array([f(s.path) for s in samples])
        lw = np.array([s.log_weight for s in samples])
    return weighted_estimate(fv, lw)


@dataclass
class ChunkStats:
    """Partial sums of a block of paths, shifted by the block's max log-weight.

    Second moments are kept centred on the block's weighted mean ``mean`` and
    re-centred on merge, which avoids cancellation in the standard error.
    """

    shift: float
    sw: float
    mean: np.ndarray
    sw2: float
    s1: np.ndarray     # sum w^2 (f - mean)
    s2: np.ndarray     # sum w^2 (f - mean)^2
    n: int
    n_degenerate: int

    @classmethod
    def from_arrays(cls, fvals, log_weights) -> "ChunkStats":
        lw = np.asarray(log_weights, dtype=float)
        fv = np.asarray(fvals, dtype=float)
        ok = np.isfinite(lw)
        n_deg = int(lw.size - ok.sum())
        tail = fv.shape[1:]
        if not np.any(ok):
            z = np.zeros(tail)
            return cls(-np.inf, 0.0, z, 0.0, z.copy(), z.copy(), lw.size, n_deg)
        shift = float(lw[ok].max())
        w = np.exp(lw[ok] - shift)
        f = fv[ok]
        sw = float(w.sum())
        mean = np.tensordot(w / sw, f, axes=1)
        r = f - mean
        w2 = w * w
        return cls(shift, sw, mean, float(w2.sum()), np.tensordot(w2, r, axes=1),
                   np.tensordot(w2, r * r, axes=1), lw.size, n_deg)

    def _recentred(self, scale: float, centre):
        """``(sw2, s1, s2)`` scaled by ``scale`` and centred on ``centre``."""
        d = self.mean - centre
        a2 = scale * scale
        return (a2 * self.sw2, a2 * (self.s1 + d * self.sw2),
                a2 * (self.s2 + 2 * d * self.s1 + d * d * self.sw2))

    def merge(self, other: "ChunkStats") -> "ChunkStats":
        n, n_deg = self.n + other.n, self.n_degenerate + other.n_degenerate
        if other.shift == -np.inf:
            return ChunkStats(self.shift, self.sw, self.mean, self.sw2, self.s1, self.s2, n, n_deg)
        if self.shift == -np.inf:
            return ChunkStats(other.shift, other.sw, other.mean, other.sw2, other.s1, other.s2,
                              n, n_deg)
        s = max(self.shift, other.shift)
        a, b = np.exp(self.shift - s), np.exp(other.shift - s)
        sw = a * self.sw + b * other.sw
        mean = (a * self.sw * self.mean + b * other.sw * other.mean) / sw
        p, q = self._recentred(a, mean), other._recentred(b, mean)
        return ChunkStats(s, sw, mean, p[0] + q[0], p[1] + q[1], p[2] + q[2], n, n_deg)

    def result(self) -> ISResult:
        if self.sw == 0:
            raise EstimationError("every sample has a degenerate (-inf) weight")
        se = np.sqrt(np.maximum(self.s2, 0.0)) / self.sw
        return ISResult(_scalar(self.mean), _scalar(se), self.sw**2 / self.sw2, self.n,
                        self.n_degenerate)


def reduce_chunks(parts: Sequence, deterministic: bool = True) -> ISResult:
    """Combine per-chunk ``(fvals, log_weights)`` pairs into one estimate.

    The deterministic mode concatenates in path order and reduces once, so
    the result is bit-identical whatever the chunking or scheduling.  The
    other mode merges partial sums in the order given (completion order when
    run in parallel), which only differs by floating-point reassociation.
    """
    if deterministic:
        fv = np.concatenate([np.asarray(p[0], dtype=float) for p in parts])
        lw = np.concatenate([np.asarray(p[1], dtype=float) for p in parts])
        return weighted_estimate(fv, lw)
    stats = None
    for fv, lw in parts:
        s = ChunkStats.from_arrays(fv, lw)
        stats = s if stats is None else stats.merge(s)
    return stats.result()


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------


def _log_weights(samples) -> np.ndarray:
    if isinstance(samples, PathBatch):
        return np.asarray(samples.log_weights, dtype=float)
    samples = list(samples)
    if samples and isinstance(samples[0], PathBatch):
        return np.concatenate([b.log_weights for b in samples])
    if samples and isinstance(samples[0], WeightedSample):
        return np.array([s.log_weight for s in samples], dtype=float)
    return np.asarray(samples, dtype=float)


def weight_diagnostics(samples, other=None, f=None) -> dict:
    """Summary of a weight sample, optionally compared with a second run.

    Parameters
    ----------
    samples : weighted samples, batches, or a raw log-weight array
    other : same, optional
        A second run (typically on a refined grid).
    f : path functional, optional
        With ``other``, the estimates of ``f`` from both runs are compared
        against their combined 3-sigma band.
    """
    lw = _log_weights(samples)
    if lw.size < 1:
        raise InvalidArgument("need at least one sample")
    ok = np.isfinite(lw)
    n = lw.size
    report = {
        "n_paths": int(n),
        "n_degenerate": int(n - ok.sum()),
    }
    if np.any(ok):
        fin = lw[ok]
        w = np.exp(fin - fin.max())
        ess = float(w.sum() ** 2 / np.sum(w * w))
        report.update({
            "log_weight_mean": float(fin.mean()),
            "log_weight_var": float(fin.var()),
            "log_weight_spread": float(fin.max() - fin.min()),
            "ess": ess,
            "ess_fraction": ess / n,
        })
    else:
        report.update({"log_weight_mean": None, "log_weight_var": None,
                       "log_weight_spread": None, "ess": 0.0, "ess_fraction": 0.0})
    if other is not None:
        report["other"] = weight_diagnostics(other)
        if f is not None:
            a = self_normalized_estimate(f, samples)
            b = self_normalized_estimate(f, other)
            diff = np.abs(np.asarray(a.estimate) - np.asarray(b.estimate))
            band = 3.0 * np.hypot(a.std_error, b.std_error)
            report["refinement"] = {
                "estimate": a.to_dict()["estimate"],
                "estimate_other": b.to_dict()["estimate"],
                "difference": diff.tolist(),
                "combined_3sigma": np.asarray(band).tolist(),
                "stable": bool(np.all(diff < band)),
            }
    return report


# --------------------------------------------------------------------------
# posterior paths between observations
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ObservationSet:
    """Start value ``u`` at time 0 and observations ``values[j]`` at ``times[j]``."""

    u: np.ndarray
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        u = np.atleast_1d(np.asarray(self.u, dtype=float))
        times = np.asarray(self.times, dtype=float).ravel()
        values = np.asarray(self.values, dtype=float).reshape(times.size, -1)
        if times.size < 1:
            raise InvalidArgument("need at least one observation")
        if times[0] <= 0 or np.any(np.diff(times) <= 0):
            raise InvalidArgument("observation times must be positive and strictly increasing")
        if values.shape[1] != u.size:
            raise InvalidArgument("observation values must have the dimension of u")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def segments(self):
        """``(t_start, t_end, u_j, v_j)`` for each consecutive pair."""
        starts = np.concatenate([[0.0], self.times[:-1]])
        us = np.vstack([self.u[None], self.values[:-1]])
        return [(float(a), float(b), us[j], self.values[j])
                for j, (a, b) in enumerate(zip(starts, self.times))]


CASE2_METHODS = ("case2-bounded", "case2-unbounded")
CASE1_METHODS = ("case1-transform", "case1-sde")
BRIDGE2D_METHODS = ("bridge2d-closed", "bridge2d-sde")


def segment_sampler(model, problem: BridgeProblem, grid: TimeGrid, method: str) -> Callable:
    """``work(seed, path_ids, stream) -> PathBatch`` for one bridge segment."""
    from . import gaussbridge, integrate

    if method in CASE2_METHODS:
        if not isinstance(model, GeneralModel):
            raise InvalidArgument(f"method {method} needs a general (invertible sigma) model")
        include_b = method == "case2-bounded"

        def work(seed, ids, stream=0):
            return integrate.case2_bridge_batch(model, problem, grid, seed, ids, include_b, stream)
        return work
    if method in CASE1_METHODS:
        if not isinstance(model, LinearModel):
            raise InvalidArgument(f"method {method} needs a linear model")
        kit = gaussbridge.GaussianBridgeKit(model, problem, grid)

        def work(seed, ids, stream=0):
            ids = np.asarray(ids, dtype=np.int64)
            if method == "case1-transform":
                vals = kit.condition_batch(kit.sample_xi_batch(seed, ids, stream))
            else:
                vals = kit.sde_batch(seed, ids, stream)
            return PathBatch(grid, vals, gaussbridge.case1_log_weight_batch(kit, vals), ids)
        return work
    if method in BRIDGE2D_METHODS:
        s = gaussbridge.integrated_bm_scale(model) if isinstance(model, LinearModel) else None
        if s is None:
            raise InvalidArgument(f"method {method} needs A=[[0,1],[0,0]], b=0, sigma=[[0],[s]]")
        kit = gaussbridge.GaussianBridgeKit(model, problem, grid) if model.has_perturbation else None
        sample = (gaussbridge.bridge2d_closed_batch if method == "bridge2d-closed"
                  else gaussbridge.bridge2d_sde_batch)

        def work(seed, ids, stream=0):
            ids = np.asarray(ids, dtype=np.int64)
            vals = sample(problem.u, problem.v, s, grid, seed, ids, stream)
            lw = np.zeros(ids.size) if kit is None else gaussbridge.case1_log_weight_batch(kit, vals)
            return PathBatch(grid, vals, lw, ids)
        return work
    raise InvalidArgument(f"unknown method {method!r}")


def _segment_grid(grid_spec, T: float) -> TimeGrid:
    if callable(grid_spec):
        return grid_spec(T)
    return make_uniform_grid(T, int(grid_spec))


def posterior_batch(model, obs: ObservationSet, grid_spec, seed: int, path_ids,
                    method: str) -> PathBatch:
    """Weighted posterior paths through every observation.

    Segment ``j`` is an independent bridge of the time-shifted model from
    ``v_{j-1}`` to ``v_j`` driven by noise stream ``j``; paths are joined at
    the observation times and segment log-weights are summed.

    ``grid_spec`` is a per-segment step count or a function ``T -> TimeGrid``.
    """
    path_ids = np.asarray(path_ids, dtype=np.int64)
    nodes, vals, lw = [], [], np.zeros(path_ids.size)
    extras = {}
    for j, (a, b, uj, vj) in enumerate(obs.segments()):
        seg_model = model.shifted(a) if a else model
        problem = BridgeProblem(uj, vj, b - a)
        grid = _segment_grid(grid_spec, b - a)
        batch = segment_sampler(seg_model, problem, grid, method)(seed, path_ids, j)
        nodes.append(grid.nodes[(1 if j else 0):] + a)
        vals.append(batch.values[:, (1 if j else 0):])
        lw = lw + batch.log_weights
        extras[f"segment{j}_log_weight"] = batch.log_weights
    full = TimeGrid(np.concatenate(nodes))
    return PathBatch(full, np.concatenate(vals, axis=1), lw, path_ids, extras)


def sample_posterior_path(model, obs: ObservationSet, grid_spec, noise, method: str
                          ) -> WeightedSample:
    """One weighted posterior path (resample by weight for unweighted draws)."""
    return posterior_batch(model, obs, grid_spec, noise.seed, [noise.path_index], method).sample(0)


def resample(samples, n: int, seed: int):
    """Multinomial resampling by normalised weight; returns the chosen indices."""
    lw = _log_weights(samples)
    ok = np.isfinite(lw)
    if not np.any(ok):
        raise EstimationError("every sample has a degenerate (-inf) weight")
    w = np.where(ok, np.exp(np.where(ok, lw, 0.0) - lw[ok].max()), 0.0)
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    return rng.choice(lw.size, size=int(n), replace=True, p=w / w.sum())
