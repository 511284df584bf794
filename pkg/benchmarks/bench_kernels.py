"""Compare the compiled kernels with the numpy fallback.

Each case is timed on both backends with identical inputs; the outputs are
checked for agreement before timings are reported.

Usage::

    python benchmarks/bench_kernels.py --paths 2000 --steps 500 --repeat 3
"""

import argparse
import json
import time

import numpy as np

from bridgesim import BridgeProblem, ExprCoefficient, GeneralModel, make_uniform_grid
from bridgesim import _pykernels, integrate
from bridgesim._backend import compiled


def _best(fn, repeat):
    times, out = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def _model(b, sigma):
    return GeneralModel(ExprCoefficient([b], 1), ExprCoefficient([[sigma]], 1), 1)


def cases(n, K):
    grid = make_uniform_grid(1.0, K)
    prob = BridgeProblem([0.0], [1.0], 1.0)
    ids = np.arange(n)
    sine = _model("sin(x1)", "1")
    tanh = _model("0", "1 + 0.5*tanh(x1)")
    h = ExprCoefficient(["x1"], 1)

    def bridge(model, include_b):
        return lambda flag: integrate.case2_bridge_batch(model, prob, grid, 1, ids, include_b,
                                                         compiled=flag)

    def forward(flag):
        return integrate.forward_batch(sine, [0.0], grid, 1, ids, h=h, compiled=flag)

    ps = ExprCoefficient(["sin(x1)*tanh(t + x1) + exp(-x1^2)"], 1).programs()
    X = np.random.default_rng(0).standard_normal((n * 50, 1))
    T = np.full(X.shape[0], 0.5)

    def program(flag):
        if flag:
            vals, _ = compiled().eval_program(ps.code, ps.offsets, ps.consts, ps.max_stack, 0,
                                              ps.t_offset, T, X)
            return vals
        return _pykernels.eval_program(ps, 0, T, X)

    return {
        "case2-unbounded, b = sin": (bridge(sine, False), "weights"),
        "case2-bounded, sigma = 1 + tanh/2": (bridge(tanh, True), "weights"),
        "forward with Girsanov weight": (forward, "weights"),
        "expression VM": (program, "values"),
    }


def _compare(a, b, kind):
    if kind == "values":
        return float(np.abs(np.asarray(a) - np.asarray(b)).max())
    return float(max(np.abs(a.values - b.values).max(),
                     np.abs(a.log_weights - b.log_weights).max()))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--paths", type=int, default=2000)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", action="store_true", help="print results as JSON")
    args = ap.parse_args(argv)
    if compiled() is None:
        raise SystemExit("compiled kernels are not built; nothing to compare")
    rows = []
    for name, (fn, kind) in cases(args.paths, args.steps).items():
        tc, oc = _best(lambda: fn(True), args.repeat)
        tp, op = _best(lambda: fn(False), args.repeat)
        rows.append({"case": name, "compiled_s": tc, "python_s": tp, "speedup": tp / tc,
                     "max_abs_diff": _compare(oc, op, kind)})
    if args.json:
        print(json.dumps(rows, indent=2))
        return
    print(f"{args.paths} paths x {args.steps} steps, best of {args.repeat}")
    print(f"{'case':36s} {'compiled':>10s} {'python':>10s} {'speedup':>8s} {'max diff':>10s}")
    for r in rows:
        print(f"{r['case']:36s} {r['compiled_s']:10.4f} {r['python_s']:10.4f} "
              f"{r['speedup']:8.1f} {r['max_abs_diff']:10.2e}")


if __name__ == "__main__":
    main()
