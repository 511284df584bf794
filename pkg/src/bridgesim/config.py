"""JSON run configurations.

A configuration has four sections::

    {
      "model":  {"kind": "general", "dimension": 1,
                 "b": ["sin(x1)"], "sigma": [["1"]], "drift_bounded": false},
      "bridge": {"u": [0], "v": [1], "T": 1},
      "run":    {"paths": 100000, "steps": 1000, "grid": "uniform", "seed": 1,
                 "method": "case2-unbounded",
                 "functional": {"kind": "coordinate_at", "t": 0.5, "coord": 1}},
      "output": {"directory": "out", "formats": ["csv", "json"]}
    }

Linear models use ``"kind": "linear"`` with ``A``, ``b``, ``sigma`` (functions
of ``t`` only), an optional perturbation ``h`` and optional ``sigma_plus``.
Coefficient entries are numbers or expression strings; coordinates in
functionals are one-based like the ``x1 .. xd`` variables.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .core import (
    BridgeProblem, GeneralModel, LinearModel, TimeGrid, make_refined_grid, make_uniform_grid,
)
from .errors import BridgeSimError, ConfigError
from .expr import ExprCoefficient

METHODS = ("case1-transform", "case1-sde", "case2-bounded", "case2-unbounded",
           "bridge2d-closed", "bridge2d-sde")
LINEAR_METHODS = ("case1-transform", "case1-sde", "bridge2d-closed", "bridge2d-sde")
GENERAL_METHODS = ("case2-bounded", "case2-unbounded")

DEFAULT_RUN = {
    "paths": 1000,
    "steps": 1000,
    "grid": "uniform",
    "gamma": 2.0,
    "seed": 0,
    "threads": 0,
    "functional": None,
    "chunk_size": None,
}


@dataclass
class RunConfig:
    raw: dict
    model: object
    problem: BridgeProblem
    method: str
    paths: int
    steps: int
    grid_kind: str
    gamma: float
    seed: int
    threads: int
    functional: dict | None
    oracle: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    s2d: float | None = None
    chunk_size: int | None = None

    @property
    def d(self) -> int:
        return self.problem.d

    def grid(self, steps: int | None = None) -> TimeGrid:
        K = self.steps if steps is None else steps
        if self.grid_kind == "uniform":
            return make_uniform_grid(self.problem.T, K)
        return make_refined_grid(self.problem.T, K, self.gamma)

    def config_hash(self) -> str:
        """SHA-256 prefix of the canonical JSON of the effective configuration.

        The output section and the thread count do not affect results and are
        left out.
        """
        body = {k: v for k, v in self.raw.items() if k != "output"}
        if "run" in body:
            body["run"] = {k: v for k, v in body["run"].items()
                           if k not in ("threads", "chunk_size")}
        text = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _need(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"missing '{key}' in the {where} section")
    return section[key]


def _vector(x, d, name):
    a = np.asarray(x, dtype=float)
    if a.shape != (d,):
        raise ConfigError(f"{name} must be a vector of length {d}")
    if not np.all(np.isfinite(a)):
        raise ConfigError(f"{name} must be finite")
    return a


def _all_numbers(entries) -> bool:
    if isinstance(entries, (list, tuple)):
        return all(_all_numbers(e) for e in entries)
    return isinstance(entries, (int, float)) and not isinstance(entries, bool)


def _time_coefficient(entries, d, shape, name):
    """Constant array or function of ``t`` for a linear-model coefficient."""
    if np.shape(entries) != shape:
        raise ConfigError(f"{name} must have shape {shape}, got {np.shape(entries)}")
    if _all_numbers(entries):
        return np.asarray(entries, dtype=float)
    coef = ExprCoefficient(entries, d)
    if coef.depends_on_state:
        raise ConfigError(f"{name} of a linear model may depend on t only")
    zero = np.zeros(d)
    return lambda t: coef(t, zero)


def _build_model(sec: dict):
    kind = _need(sec, "kind", "model")
    d = int(_need(sec, "dimension", "model"))
    if d < 1:
        raise ConfigError("dimension must be >= 1")
    if kind == "general":
        b = sec.get("b", [0] * d)
        sigma = _need(sec, "sigma", "model")
        if np.shape(b) != (d,):
            raise ConfigError(f"b must be a list of {d} entries")
        if np.shape(sigma) != (d, d):
            raise ConfigError(f"sigma must be a {d}x{d} matrix")
        return GeneralModel(ExprCoefficient(b, d), ExprCoefficient(sigma, d), d,
                            bool(sec.get("drift_bounded", False)))
    if kind == "linear":
        sigma = _need(sec, "sigma", "model")
        if np.ndim(sigma) != 2 or np.shape(sigma)[0] != d:
            raise ConfigError(f"sigma must be a {d}xm matrix")
        m = np.shape(sigma)[1]
        A = _time_coefficient(sec.get("A", [[0] * d for _ in range(d)]), d, (d, d), "A")
        b = _time_coefficient(sec.get("b", [0] * d), d, (d,), "b")
        S = _time_coefficient(sigma, d, (d, m), "sigma")
        h = sec.get("h")
        if h is not None:
            if np.shape(h) != (m,):
                raise ConfigError(f"h must be a list of {m} entries")
            h = ExprCoefficient(h, d)
        sp = sec.get("sigma_plus")
        if sp is not None:
            sp = _time_coefficient(sp, d, (m, d), "sigma_plus")
        return LinearModel(A, b, S, h=h, sigma_plus=sp, d=d, m=m)
    raise ConfigError(f"unknown model kind {kind!r} (expected 'linear' or 'general')")


def _bridge2d_scale(model: LinearModel) -> float:
    from .gaussbridge import integrated_bm_scale

    s = integrated_bm_scale(model)
    if s is None:
        raise ConfigError("bridge2d methods need A=[[0,1],[0,0]], b=0, sigma=[[0],[s]], s != 0")
    return s


def parse_config(raw: dict) -> RunConfig:
    """Validate a configuration dictionary and build the model objects."""
    try:
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a JSON object")
        model = _build_model(_need(raw, "model", "top-level"))
        br = _need(raw, "bridge", "top-level")
        d = int(raw["model"]["dimension"])
        problem = BridgeProblem(_vector(_need(br, "u", "bridge"), d, "u"),
                                _vector(_need(br, "v", "bridge"), d, "v"),
                                float(_need(br, "T", "bridge")))
        run = dict(DEFAULT_RUN)
        run.update(raw.get("run", {}))
        method = run.get("method")
        if method not in METHODS:
            raise ConfigError(f"run.method must be one of {', '.join(METHODS)}")
        if method in GENERAL_METHODS and not isinstance(model, GeneralModel):
            raise ConfigError(f"method {method} needs a general model")
        if method in LINEAR_METHODS and not isinstance(model, LinearModel):
            raise ConfigError(f"method {method} needs a linear model")
        if method == "case2-bounded" and not model.drift_bounded:
            raise ConfigError("case2-bounded requires model.drift_bounded = true")
        s2d = _bridge2d_scale(model) if method.startswith("bridge2d") else None
        paths, steps = int(run["paths"]), int(run["steps"])
        if paths < 1 or steps < 2:
            raise ConfigError("run.paths must be >= 1 and run.steps >= 2")
        if run["grid"] not in ("uniform", "refined"):
            raise ConfigError("run.grid must be 'uniform' or 'refined'")
        seed = int(run["seed"])
        if not 0 <= seed < 2**64:
            raise ConfigError("run.seed must be an unsigned 64-bit integer")
        cfg = RunConfig(raw, model, problem, method, paths, steps, run["grid"],
                        float(run["gamma"]), seed, int(run["threads"]), run.get("functional"),
                        dict(raw.get("oracle", {})), dict(raw.get("output", {})), s2d)
        if run.get("chunk_size") is not None:
            cfg.chunk_size = int(run["chunk_size"])
            if cfg.chunk_size < 1:
                raise ConfigError("run.chunk_size must be >= 1")
        cfg.grid()
        return cfg
    except ConfigError:
        raise
    except (BridgeSimError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(raw)


def with_overrides(raw: dict, seed=None, paths=None, steps=None, threads=None) -> dict:
    """Copy of ``raw`` with command-line overrides applied to the run section."""
    out = json.loads(json.dumps(raw))
    run = out.setdefault("run", {})
    if seed is not None:
        run["seed"] = int(seed)
    if paths is not None:
        run["paths"] = int(paths)
    if steps is not None:
        run["steps"] = int(steps)
    if threads is not None:
        run["threads"] = int(threads)
    return out


def build_functional(spec: dict | None, d: int, T: float):
    """Path functional from its config description (default: first coordinate at ``T/2``)."""
    from . import estimate

    if spec is None:
        spec = {"kind": "coordinate_at", "t": T / 2, "coord": 1}
    kind = spec.get("kind")
    coord = int(spec.get("coord", 1))
    if not 1 <= coord <= d:
        raise ConfigError(f"functional coordinate must be in 1..{d}")
    if kind == "terminal":
        return estimate.terminal(coord - 1)
    if kind == "coordinate_at":
        return estimate.coordinate_at(float(spec.get("t", T / 2)), coord - 1)
    if kind == "path_integral":
        try:
            g = ExprCoefficient(spec["expr"], d)
        except (BridgeSimError, KeyError) as exc:
            raise ConfigError(f"bad path_integral functional: {exc}") from exc
        return estimate.path_integral(g)
    raise ConfigError("functional.kind must be terminal, coordinate_at or path_integral")
