"""Shared domain types: time grids, paths, bridge problems and model descriptions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import EvaluationError, InvalidArgument, NumericError

# relative tolerance used when locating a requested time on a grid
NODE_RTOL = 1e-9


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing partition ``0 = t_0 < ... < t_K = T``."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = _frozen(self.nodes)
        if nodes.ndim != 1 or nodes.size < 3:
            raise InvalidArgument("a time grid needs at least 3 nodes (K >= 2)")
        if not np.all(np.isfinite(nodes)):
            raise InvalidArgument("grid nodes must be finite")
        if nodes[0] != 0.0:
            raise InvalidArgument("grid must start at t = 0")
        if np.any(np.diff(nodes) <= 0):
            raise InvalidArgument("grid nodes must be strictly increasing")
        object.__setattr__(self, "nodes", nodes)

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    @property
    def K(self) -> int:
        """Number of intervals."""
        return self.nodes.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.nodes)

    def mesh(self) -> float:
        return float(np.max(self.dt))

    def index_of(self, t: float) -> int:
        """Index of the node equal to ``t`` (up to a relative 1e-9 of T)."""
        i = int(np.argmin(np.abs(self.nodes - t)))
        if abs(self.nodes[i] - t) > NODE_RTOL * max(self.T, 1.0):
            raise InvalidArgument(f"time {t!r} is not a node of the grid")
        return i

    def __len__(self):
        return self.nodes.size

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.nodes, other.nodes)

    def __hash__(self):
        return hash(self.nodes.tobytes())


def make_uniform_grid(T: float, K: int) -> TimeGrid:
    """Uniform grid ``t_i = i T / K``."""
    if not T > 0:
        raise InvalidArgument(f"horizon T must be positive, got {T!r}")
    if int(K) != K or K < 2:
        raise InvalidArgument(f"step count K must be an integer >= 2, got {K!r}")
    K = int(K)
    nodes = np.arange(K + 1) * (T / K)
    nodes[-1] = T
    return TimeGrid(nodes)


def make_refined_grid(T: float, K: int, gamma: float = 2.0) -> TimeGrid:
    """Grid ``t_i = T (1 - (1 - i/K)^gamma)``, clustered near ``T`` for ``gamma > 1``."""
    if not gamma >= 1:
        raise InvalidArgument(f"refinement exponent gamma must be >= 1, got {gamma!r}")
    base = make_uniform_grid(T, K)
    if T * (1.0 / base.K) ** gamma <= 4 * np.spacing(T):
        raise InvalidArgument(
            f"refined grid (K={base.K}, gamma={gamma}) has a last step below floating-point resolution")
    s = np.arange(base.K + 1) / base.K
    nodes = T * (1.0 - (1.0 - s) ** gamma)
    nodes[0], nodes[-1] = 0.0, T
    return TimeGrid(nodes)


@dataclass(frozen=True, eq=False)
class Path:
    """A d-dimensional sample path tabulated on a :class:`TimeGrid`."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != len(self.grid):
            raise InvalidArgument(
                f"path has {values.shape[0]} values for a grid of {len(self.grid)} nodes"
            )
        if not np.all(np.isfinite(values)):
            raise InvalidArgument("path values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def at(self, t: float) -> np.ndarray:
        return self.values[self.grid.index_of(t)]


@dataclass(frozen=True)
class BridgeProblem:
    """Start value ``u``, target ``v`` and horizon ``T``."""

    u: np.ndarray
    v: np.ndarray
    T: float

    def __post_init__(self):
        u = _frozen(np.atleast_1d(self.u))
        v = _frozen(np.atleast_1d(self.v))
        if u.shape != v.shape or u.ndim != 1:
            raise InvalidArgument("u and v must be vectors of the same dimension")
        if not self.T > 0:
            raise InvalidArgument(f"horizon T must be positive, got {self.T!r}")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "T", float(self.T))

    @property
    def d(self) -> int:
        return self.u.size


@dataclass(frozen=True, eq=False)
class WeightedSample:
    """A bridge path with the natural log of its unnormalised importance weight."""

    path: Path
    log_weight: float

    def __post_init__(self):
        lw = float(self.log_weight)
        if np.isnan(lw) or lw == np.inf:
            raise InvalidArgument(f"log-weight must be finite or -inf, got {lw!r}")
        object.__setattr__(self, "log_weight", lw)


@dataclass(eq=False)
class PathBatch:
    """Many paths on a shared grid, stored as one ``(n, K+1, d)`` array.

    ``extras`` carries per-path diagnostics produced by the sampler (for
    example the pre-pinning endpoint deviation or blow-up step).
    """

    grid: TimeGrid
    values: np.ndarray
    log_weights: np.ndarray
    path_ids: np.ndarray
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.values.shape[0]
        if self.values.ndim != 3 or self.values.shape[1] != len(self.grid):
            raise InvalidArgument("batch values must have shape (n, K+1, d)")
        if self.log_weights.shape != (n,) or self.path_ids.shape != (n,):
            raise InvalidArgument("log_weights and path_ids must have shape (n,)")

    def __len__(self):
        return self.values.shape[0]

    def __iter__(self) -> Iterator[WeightedSample]:
        for i in range(len(self)):
            yield self.sample(i)

    def sample(self, i: int) -> WeightedSample:
        return WeightedSample(Path(self.grid, self.values[i]), self.log_weights[i])

    @classmethod
    def concatenate(cls, batches: Sequence["PathBatch"]) -> "PathBatch":
        grid = batches[0].grid
        extras = {}
        for key in batches[0].extras:
            extras[key] = np.concatenate([b.extras[key] for b in batches])
        return cls(
            grid,
            np.concatenate([b.values for b in batches]),
            np.concatenate([b.log_weights for b in batches]),
            np.concatenate([b.path_ids for b in batches]),
            extras,
        )


def validate_paths(values: np.ndarray) -> None:
    """Raise if any sampled path value is non-finite."""
    if not np.all(np.isfinite(values)):
        raise NumericError("sampled paths contain non-finite values")


# --------------------------------------------------------------------------
# coefficient functions
# --------------------------------------------------------------------------


class CoefficientFn:
    """A deterministic map ``(t, x) -> array`` of fixed output ``shape``.

    ``x`` has shape ``(..., d)`` and ``t`` is a scalar or an array that
    broadcasts against ``x.shape[:-1]``; the result has shape
    ``x.shape[:-1] + shape``.
    """

    shape: tuple = ()

    def __call__(self, t, x) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def shifted(self, t0: float) -> "CoefficientFn":
        """The same coefficient with time measured from ``t0``."""
        return _ShiftedCoefficient(self, float(t0))

    @property
    def is_zero(self) -> bool:
        return False


class ConstantCoefficient(CoefficientFn):
    def __init__(self, value):
        self.value = _frozen(value)
        self.shape = self.value.shape

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        lead = np.broadcast_shapes(np.shape(t), x.shape[:-1])
        return np.broadcast_to(self.value, lead + self.shape).copy()

    def shifted(self, t0):
        return self

    @property
    def is_zero(self):
        return not np.any(self.value)

    def __repr__(self):
        return f"ConstantCoefficient({self.value.tolist()!r})"


class CallableCoefficient(CoefficientFn):
    """Wrap a Python function ``fn(t, x)``.

    With ``vectorized=False`` the function is called once per point with a
    scalar ``t`` and a ``(d,)`` vector.
    """

    def __init__(self, fn: Callable, shape=(), vectorized: bool = True):
        self.fn = fn
        self.shape = tuple(shape)
        self.vectorized = vectorized

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        lead = np.broadcast_shapes(np.shape(t), x.shape[:-1])
        if self.vectorized:
            out = np.asarray(self.fn(t, x), dtype=float)
            out = np.broadcast_to(out, lead + self.shape).copy()
        else:
            tb = np.broadcast_to(t, lead)
            xb = np.broadcast_to(x, lead + x.shape[-1:])
            out = np.empty(lead + self.shape)
            for idx in np.ndindex(*lead):
                out[idx] = self.fn(float(tb[idx]), xb[idx])
        if np.any(np.isnan(out)):
            raise EvaluationError(f"coefficient {self.fn!r} produced NaN")
        return out


class _ShiftedCoefficient(CoefficientFn):
    def __init__(self, inner: CoefficientFn, t0: float):
        self.inner = inner
        self.t0 = t0
        self.shape = inner.shape

    def __call__(self, t, x):
        return self.inner(np.asarray(t, dtype=float) + self.t0, x)

    def shifted(self, t0):
        return _ShiftedCoefficient(self.inner, self.t0 + t0)

    @property
    def is_zero(self):
        return self.inner.is_zero


def as_coefficient(obj, shape=None) -> CoefficientFn:
    """Coerce constants and callables to a :class:`CoefficientFn`."""
    if isinstance(obj, CoefficientFn):
        return obj
    if callable(obj):
        if shape is None:
            raise InvalidArgument("a callable coefficient needs an explicit shape")
        return CallableCoefficient(obj, shape)
    return ConstantCoefficient(obj)


def _time_function(obj, name):
    """Coerce a constant or ``f(t)`` into a function of time returning an array."""
    if hasattr(obj, "constant"):
        return obj
    if callable(obj):
        def fn(t, _f=obj):
            return np.asarray(_f(t), dtype=float)
        return fn
    value = _frozen(obj)

    def const(t, _v=value):
        return _v
    const.constant = value
    return const


class LinearModel:
    """Linear model ``dx = (sigma_t h(t,x) + A_t x + b_t) dt + sigma_t dw``.

    ``A``, ``b``, ``sigma`` (and optionally ``sigma_plus``) are constants or
    functions of time alone; ``h`` is a :class:`CoefficientFn` with values in
    ``R^m``.  When ``sigma_plus`` is omitted the rank-revealing left
    pseudo-inverse of ``sigma(t)`` is used.
    """

    def __init__(self, A, b, sigma, h=None, sigma_plus=None, d=None, m=None):
        self.A = _time_function(A, "A")
        self.b = _time_function(b, "b")
        self.sigma = _time_function(sigma, "sigma")
        s0 = np.atleast_2d(self.sigma(0.0))
        self.d = int(d if d is not None else s0.shape[0])
        self.m = int(m if m is not None else s0.shape[1])
        if s0.shape != (self.d, self.m):
            raise InvalidArgument(f"sigma must be {self.d}x{self.m}, got {s0.shape}")
        if np.shape(self.A(0.0)) != (self.d, self.d):
            raise InvalidArgument(f"A must be {self.d}x{self.d}")
        if np.shape(self.b(0.0)) != (self.d,):
            raise InvalidArgument(f"b must be a vector of length {self.d}")
        self.h = ConstantCoefficient(np.zeros(self.m)) if h is None else as_coefficient(h, (self.m,))
        if self.h.shape != (self.m,):
            raise InvalidArgument(f"h must take values in R^{self.m}")
        if sigma_plus is None:
            from .linalg import left_pinv

            if hasattr(self.sigma, "constant"):
                sp = left_pinv(self.sigma.constant)
                self.sigma_plus = _time_function(sp, "sigma_plus")
            else:
                self.sigma_plus = lambda t: left_pinv(self.sigma(t))
        else:
            self.sigma_plus = _time_function(sigma_plus, "sigma_plus")
        self._spec = (A, b, sigma, sigma_plus)

    @property
    def has_perturbation(self) -> bool:
        return not self.h.is_zero

    def check_left_inverse(self, times, tol: float = 1e-10) -> float:
        """Max deviation of ``sigma_plus(t) sigma(t)`` from the identity."""
        worst = 0.0
        for t in np.atleast_1d(times):
            dev = np.max(np.abs(self.sigma_plus(t) @ self.sigma(t) - np.eye(self.m)))
            worst = max(worst, float(dev))
        if worst > tol:
            raise NumericError(f"sigma_plus is not a left inverse of sigma (deviation {worst:.3g})")
        return worst

    def drift(self, t, x):
        """Full drift ``sigma h + A x + b`` evaluated at scalar ``t``."""
        x = np.asarray(x, dtype=float)
        return (
            np.einsum("ij,...j->...i", self.sigma(t), self.h(t, x))
            + np.einsum("ij,...j->...i", self.A(t), x)
            + self.b(t)
        )

    def without_perturbation(self) -> "LinearModel":
        return LinearModel(self.A, self.b, self.sigma, None, self.sigma_plus, self.d, self.m)

    def shifted(self, t0: float) -> "LinearModel":
        def sh(f):
            if hasattr(f, "constant"):
                return f.constant
            return lambda t: f(t + t0)

        return LinearModel(
            sh(self.A), sh(self.b), sh(self.sigma), self.h.shifted(t0),
            sh(self.sigma_plus), self.d, self.m,
        )


# condition-number guard for sigma in the invertible-sigma model
SIGMA_COND_MAX = 1e12


class GeneralModel:
    """Model ``dx = b(t,x) dt + sigma(t,x) dw`` with square invertible ``sigma``.

    ``drift_bounded`` records which regime the caller claims: bounded drift
    permits the bounded-drift weight, unbounded drift only the other one.
    """

    def __init__(self, b, sigma, d=None, drift_bounded: bool = False):
        if d is None:
            if isinstance(b, CoefficientFn):
                d = b.shape[0]
            elif isinstance(sigma, CoefficientFn):
                d = sigma.shape[0]
            else:
                d = np.atleast_1d(b).size
        self.d = int(d)
        self.b = as_coefficient(b, (self.d,))
        self.sigma = as_coefficient(sigma, (self.d, self.d))
        if self.b.shape != (self.d,):
            raise InvalidArgument(f"b must take values in R^{self.d}, got shape {self.b.shape}")
        if self.sigma.shape != (self.d, self.d):
            raise InvalidArgument(f"sigma must be {self.d}x{self.d}, got shape {self.sigma.shape}")
        self.drift_bounded = bool(drift_bounded)

    def shifted(self, t0: float) -> "GeneralModel":
        return GeneralModel(self.b.shifted(t0), self.sigma.shifted(t0), self.d, self.drift_bounded)

    def sigma_checked(self, t, x) -> np.ndarray:
        """Evaluate sigma and enforce the condition-number guard."""
        s = self.sigma(t, x)
        check_sigma(s)
        return s

    def A(self, t, x) -> np.ndarray:
        """``sigma^{-T} sigma^{-1}`` at ``(t, x)``, assembled from linear solves."""
        s = self.sigma_checked(t, x)
        eye = np.broadcast_to(np.eye(self.d), s.shape)
        w = np.linalg.solve(s, eye)
        return np.swapaxes(w, -1, -2) @ w


def check_sigma(s: np.ndarray) -> float:
    """Raise :class:`NumericError` if any matrix in ``s`` is (near) singular."""
    if not np.all(np.isfinite(s)):
        raise NumericError("sigma is not finite")
    if s.shape[-1] == 1:
        a = np.abs(s[..., 0, 0])
        if np.any(a == 0):
            raise NumericError("sigma is singular")
        return 1.0
    cond = np.linalg.cond(s, 1)
    worst = float(np.max(cond))
    if not worst <= SIGMA_COND_MAX:
        raise NumericError(f"sigma is ill-conditioned (condition number {worst:.3g})")
    return worst
