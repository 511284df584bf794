"""Command-line interface.

Subcommands
-----------
check     validate a configuration; probe sigma on a state lattice (general
          models) or report controllability (linear models)
sample    write bridge paths as CSV
estimate  self-normalised estimate of a path functional as JSON
oracle    compare the estimator with a reference value (rejection sampling
          or exact Gaussian conditioning)
diagnose  weight diagnostics and a grid-refinement study

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 oracle has too few accepted paths.
"""

from __future__ import annotations

import argparse
import io
import itertools
import json
import logging
import os
import sys
import time

import numpy as np

from . import estimate, girsanov, integrate, linalg, oracle
from .config import RunConfig, build_functional, load_config, parse_config, with_overrides
from .core import (
    SIGMA_COND_MAX, CallableCoefficient, ConstantCoefficient, GeneralModel, LinearModel,
)
from .errors import BridgeSimError, ConfigError, InvalidArgument, NumericError, OracleInsufficient

log = logging.getLogger("bridgesim")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ORACLE = 0, 1, 2, 3
# state-lattice probe: at most this many points per time
PROBE_MAX_POINTS = 4096


def setup_logging():
    """Log level from ``BRIDGESIM_LOG`` (name such as ``INFO`` or a number)."""
    level = os.environ.get("BRIDGESIM_LOG", "WARNING").strip().upper()
    value = int(level) if level.isdigit() else getattr(logging, level, None)
    if not isinstance(value, int):
        value = logging.WARNING
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(value)
    log.propagate = False


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _out_dir(args, cfg: RunConfig):
    d = args.out or cfg.output.get("directory")
    if d:
        os.makedirs(d, exist_ok=True)
    return d


def _emit_json(obj, args, cfg, name):
    text = _dump(obj)
    d = _out_dir(args, cfg)
    if d:
        with open(os.path.join(d, name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    sys.stdout.write(text)


def _provenance(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, "method": cfg.method}


def csv_header(cfg: RunConfig) -> str:
    cols = ["path_id", "t"] + [f"x{i + 1}" for i in range(cfg.d)] + ["log_weight"]
    return f"# config_hash={cfg.config_hash()} seed={cfg.seed}\n" + ",".join(cols) + "\n"


def csv_rows(batch) -> str:
    """Rows ``path_id,t,x1..xd,log_weight`` for every node of every path."""
    n, K1, d = batch.values.shape
    buf = io.StringIO()
    fmt = ",".join(["%d", "%.17g"] + ["%.17g"] * d + ["%.17g"])
    table = np.empty((n * K1, d + 3))
    table[:, 0] = np.repeat(batch.path_ids, K1)
    table[:, 1] = np.tile(batch.grid.nodes, n)
    table[:, 2:2 + d] = batch.values.reshape(n * K1, d)
    table[:, -1] = np.repeat(batch.log_weights, K1)
    np.savetxt(buf, table, fmt=fmt)
    return buf.getvalue()


# --------------------------------------------------------------------------
# running a sampler over all paths
# --------------------------------------------------------------------------


def _sampler(cfg: RunConfig, steps=None):
    grid = cfg.grid(steps)
    return grid, estimate.segment_sampler(cfg.model, cfg.problem, grid, cfg.method)


def _chunk(cfg, grid):
    return cfg.chunk_size or integrate.default_chunk_size(grid.K, cfg.d)


def _pin_violations(cfg, grid, batch) -> int:
    prepin = batch.extras.get("prepin")
    if prepin is None:
        return 0
    ok = batch.extras["blowup"] < 0
    return int(np.sum(ok & (prepin > girsanov.pinning_threshold(grid, cfg.problem.v))))


def run_estimate(cfg: RunConfig, threads: int, deterministic: bool, steps=None, paths=None):
    """Estimate the configured functional; returns ``(ISResult, extra)``."""
    grid, work = _sampler(cfg, steps)
    f = build_functional(cfg.functional, cfg.d, cfg.problem.T)
    seed = cfg.seed

    def chunk(ids):
        batch = work(seed, ids)
        return (np.asarray(f.batch(batch.values, grid), dtype=float), batch.log_weights,
                _pin_violations(cfg, grid, batch))

    n = cfg.paths if paths is None else paths
    parts = integrate.run_chunked(chunk, n, _chunk(cfg, grid), threads, ordered=deterministic)
    res = estimate.reduce_chunks([(p[0], p[1]) for p in parts], deterministic)
    pins = sum(p[2] for p in parts)
    if pins:
        log.warning("%d of %d bridge endpoints missed v by more than the pinning tolerance",
                    pins, n)
    return res, {"pin_violations": pins}


def _result_json(cfg, res) -> dict:
    out = res.to_dict()
    out.update(_provenance(cfg))
    return out


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _probe_points(cfg: RunConfig, scale: float) -> np.ndarray:
    u, v, T = cfg.problem.u, cfg.problem.v, cfg.problem.T
    width = 3.0 * np.sqrt(T) * scale
    lo, hi = np.minimum(u, v) - width, np.maximum(u, v) + width
    d = cfg.d
    for per_axis in (9, 7, 5, 3):
        if per_axis ** d <= PROBE_MAX_POINTS:
            axes = [np.linspace(lo[i], hi[i], per_axis) for i in range(d)]
            # the endpoints themselves are always probed
            return np.vstack([u, v, np.array(list(itertools.product(*axes)))])
    # high dimension: the lattice diagonal and the segment from u to v
    s = np.linspace(0.0, 1.0, 65)[:, None]
    return np.vstack([lo + s * (hi - lo), u + s * (v - u)])


def _cond1(S: np.ndarray) -> np.ndarray:
    if S.shape[-1] == 1:
        a = np.abs(S[..., 0, 0])
        return np.where(a > 0, 1.0, np.inf)
    out = np.empty(S.shape[0])
    for i, s in enumerate(S):
        try:
            out[i] = np.linalg.cond(s, 1)
        except np.linalg.LinAlgError:
            out[i] = np.inf
    return np.where(np.isfinite(out), out, np.inf)


def check_general(cfg: RunConfig) -> dict:
    model: GeneralModel = cfg.model
    T, K = cfg.problem.T, cfg.steps
    s0 = model.sigma(0.0, cfg.problem.u)
    X = _probe_points(cfg, max(1.0, float(np.linalg.norm(s0, 2))))
    worst, where, max_b = -1.0, None, 0.0
    for t in (0.0, 0.25 * T, 0.5 * T, 0.75 * T, T * (1 - 1.0 / K)):
        S = np.asarray(model.sigma(t, X), dtype=float)
        B = np.asarray(model.b(t, X), dtype=float)
        if not np.all(np.isfinite(B)):
            raise NumericError(f"drift is not finite on the probe lattice at t = {t:.6g}")
        max_b = max(max_b, float(np.max(np.abs(B))))
        ok = np.all(np.isfinite(S.reshape(len(X), -1)), axis=1)
        c = np.full(len(X), np.inf)
        if np.any(ok):
            c[ok] = _cond1(S[ok])
        i = int(np.argmax(c))
        if c[i] > worst:
            worst, where = float(c[i]), {"t": float(t), "x": X[i].tolist()}
    ok = worst <= SIGMA_COND_MAX
    report = {"kind": "general", "passed": bool(ok),
              "sigma_probe": {"points": int(len(X)), "times": 5, "max_condition": worst,
                              "limit": SIGMA_COND_MAX, "worst_at": where},
              "max_abs_drift": max_b, "drift_bounded_claim": model.drift_bounded}
    if ok and _time_only(model.sigma):
        # Gramian of the driftless reference process dx = sigma(t) dw
        d = cfg.d
        ref = LinearModel(np.zeros((d, d)), np.zeros(d),
                          lambda t: np.asarray(model.sigma(t, cfg.problem.u), dtype=float))
        ctrl = linalg.check_controllable(linalg.covariance_table(ref, cfg.grid()))
        report["controllability"] = ctrl.to_dict()
        report["passed"] = bool(ctrl.passed)
    return report


def _time_only(coef) -> bool:
    if isinstance(coef, ConstantCoefficient):
        return True
    return getattr(coef, "depends_on_state", True) is False


def check_linear(cfg: RunConfig) -> dict:
    model: LinearModel = cfg.model
    grid = cfg.grid()
    table = linalg.covariance_table(model, grid)
    ctrl = linalg.check_controllable(table)
    report = {"kind": "linear", "controllability": ctrl.to_dict(), "passed": ctrl.passed}
    if model.has_perturbation:
        try:
            dev = model.check_left_inverse(grid.nodes)
            report["left_inverse_deviation"] = dev
        except NumericError as exc:
            report["left_inverse_error"] = str(exc)
            report["passed"] = False
    if cfg.s2d is not None:
        report["integrated_bm_scale"] = cfg.s2d
    return report


def cmd_check(cfg: RunConfig, args) -> int:
    report = check_general(cfg) if isinstance(cfg.model, GeneralModel) else check_linear(cfg)
    report.update(_provenance(cfg))
    report["dimension"] = cfg.d
    _emit_json(report, args, cfg, "check.json")
    return EXIT_OK if report["passed"] else EXIT_NUMERIC


def cmd_sample(cfg: RunConfig, args) -> int:
    grid, work = _sampler(cfg)
    chunk = _chunk(cfg, grid)
    d = _out_dir(args, cfg)
    fh = open(os.path.join(d, "paths.csv"), "w", encoding="utf-8", newline="\n") if d else sys.stdout
    try:
        fh.write(csv_header(cfg))
        # blocks of chunks keep memory bounded while preserving path order
        threads = integrate.resolve_threads(args.threads_eff)
        per_round = chunk * threads
        for start in range(0, cfg.paths, per_round):
            n = min(per_round, cfg.paths - start)
            for batch in integrate.run_chunked(lambda ids: work(cfg.seed, ids), n, chunk,
                                               threads, first_id=start):
                fh.write(csv_rows(batch))
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def cmd_estimate(cfg: RunConfig, args) -> int:
    t0 = time.perf_counter()
    res, _ = run_estimate(cfg, args.threads_eff, args.deterministic_reduce)
    log.info("estimate finished in %.2f s", time.perf_counter() - t0)
    _emit_json(_result_json(cfg, res), args, cfg, "result.json")
    return EXIT_OK


def _forward_model(cfg: RunConfig):
    """Unconditioned dynamics as a :class:`GeneralModel` for the rejection oracle."""
    model = cfg.model
    if isinstance(model, GeneralModel):
        return model
    if model.m != model.d:
        raise ConfigError("rejection oracle needs a square sigma")

    def drift(t, X):
        X = np.asarray(X, dtype=float)
        out = X @ np.asarray(model.A(t)).T + np.asarray(model.b(t))
        return out + model.h(t, X) @ np.asarray(model.sigma(t)).T

    def sigma(t, X):
        return np.broadcast_to(np.asarray(model.sigma(float(t))), np.shape(X)[:-1] + (d, d))

    d = model.d
    return GeneralModel(CallableCoefficient(drift, (d,)), CallableCoefficient(sigma, (d, d)), d)


def cmd_oracle(cfg: RunConfig, args) -> int:
    res, _ = run_estimate(cfg, args.threads_eff, args.deterministic_reduce)
    f = build_functional(cfg.functional, cfg.d, cfg.problem.T)
    report = {"estimator": _result_json(cfg, res)}
    oc = cfg.oracle
    gaussian = isinstance(cfg.model, LinearModel) and not cfg.model.has_perturbation
    if gaussian and oc.get("kind", "gaussian") == "gaussian":
        spec = cfg.functional or {"kind": "coordinate_at", "t": cfg.problem.T / 2, "coord": 1}
        if spec.get("kind") not in ("terminal", "coordinate_at"):
            raise ConfigError("the Gaussian oracle supports terminal and coordinate_at functionals")
        grid = cfg.grid()
        cg = oracle.gaussian_conditioning_oracle(cfg.model, grid, cfg.problem.v, cfg.problem.u)
        t = cfg.problem.T if spec["kind"] == "terminal" else float(spec.get("t", cfg.problem.T / 2))
        i, c = grid.index_of(t), int(spec.get("coord", 1)) - 1
        exact = float(cg.mean[i, c])
        band = 3.0 * float(res.std_error)
        report["oracle"] = {"kind": "gaussian", "mean": exact,
                            "variance": float(cg.cov_index(i, i)[c, c])}
        diff = abs(float(res.estimate) - exact)
    else:
        model = _forward_model(cfg)
        grid = oracle.oracle_grid(cfg.grid())
        N = int(oc.get("paths", 1_000_000))
        rr = oracle.rejection_conditional(model, cfg.problem, f, oc.get("epsilon"), N, grid,
                                          cfg.seed, threads=args.threads_eff,
                                          stream=int(oc.get("stream", 1)))
        report["oracle"] = dict(rr.to_dict(), kind="rejection",
                                half_shift_within_3sigma=rr.shift_within_3sigma())
        diff = float(np.max(np.abs(np.asarray(res.estimate) - np.asarray(rr.estimate))))
        band = float(np.min(3.0 * np.hypot(res.std_error, rr.std_error)))
    report.update({"difference": diff, "combined_3sigma": band, "agree": bool(diff < band)})
    report.update(_provenance(cfg))
    _emit_json(report, args, cfg, "oracle.json")
    return EXIT_OK


def cmd_diagnose(cfg: RunConfig, args) -> int:
    f = build_functional(cfg.functional, cfg.d, cfg.problem.T)
    factor = int(cfg.raw.get("run", {}).get("refine", 2))
    reports = {}
    parts = {}
    for K in (cfg.steps, factor * cfg.steps):
        grid, work = _sampler(cfg, K)

        def chunk(ids, work=work, grid=grid):
            b = work(cfg.seed, ids)
            return (np.asarray(f.batch(b.values, grid), dtype=float), b.log_weights,
                    _pin_violations(cfg, grid, b))

        got = integrate.run_chunked(chunk, cfg.paths, _chunk(cfg, grid), args.threads_eff)
        parts[K] = got
        lw = np.concatenate([p[1] for p in got])
        rep = estimate.weight_diagnostics(lw)
        rep["pin_violations"] = int(sum(p[2] for p in got))
        rep["steps"] = K
        rep.update(estimate.reduce_chunks([(p[0], p[1]) for p in got]).to_dict())
        reports[K] = rep
    K1, K2 = cfg.steps, factor * cfg.steps
    a = estimate.reduce_chunks([(p[0], p[1]) for p in parts[K1]])
    b = estimate.reduce_chunks([(p[0], p[1]) for p in parts[K2]])
    diff = np.abs(np.asarray(a.estimate) - np.asarray(b.estimate))
    band = 3.0 * np.hypot(a.std_error, b.std_error)
    out = {"coarse": reports[K1], "fine": reports[K2],
           "refinement": {"difference": diff.tolist(), "combined_3sigma": np.asarray(band).tolist(),
                          "stable": bool(np.all(diff < band))}}
    out.update(_provenance(cfg))
    _emit_json(out, args, cfg, "diagnose.json")
    return EXIT_OK


COMMANDS = {
    "check": cmd_check,
    "sample": cmd_sample,
    "estimate": cmd_estimate,
    "oracle": cmd_oracle,
    "diagnose": cmd_diagnose,
}


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the configuration-error code, not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="JSON run configuration")
    common.add_argument("--seed", type=int, metavar="U64", help="override run.seed")
    common.add_argument("--paths", type=int, metavar="N", help="override run.paths")
    common.add_argument("--steps", type=int, metavar="K", help="override run.steps")
    common.add_argument("--out", metavar="DIR", help="output directory (default: output.directory)")
    common.add_argument("--threads", type=int, metavar="N", help="worker threads, 0 = one per CPU")
    common.add_argument("--deterministic-reduce", action="store_true",
                        help="aggregate in path order for bit-exact results")
    parser = _Parser(prog="bridgesim", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "check": "validate a configuration",
        "sample": "write bridge paths as CSV",
        "estimate": "estimate the configured functional",
        "oracle": "compare the estimator with a reference value",
        "diagnose": "weight diagnostics and grid refinement",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def main(argv=None) -> int:
    setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        base = load_config(args.config)
        raw = with_overrides(base.raw, args.seed, args.paths, args.steps, args.threads)
        cfg = parse_config(raw)
        args.threads_eff = cfg.threads
        integrate.resolve_threads(cfg.threads)
        return COMMANDS[args.command](cfg, args)
    except OracleInsufficient as exc:
        log.error("oracle insufficient: %s", exc)
        return EXIT_ORACLE
    except (ConfigError, InvalidArgument) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("i/o error: %s", exc)
        return EXIT_CONFIG
    except BridgeSimError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
