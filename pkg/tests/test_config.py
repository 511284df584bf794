import copy

import numpy as np
import pytest

from bridgesim import ConfigError, GeneralModel, LinearModel
from bridgesim.config import build_functional, load_config, parse_config, with_overrides

BASE = {
    "model": {"kind": "general", "dimension": 1, "b": ["sin(x1)"], "sigma": [["1"]]},
    "bridge": {"u": [0], "v": [1], "T": 1},
    "run": {"paths": 10, "steps": 20, "seed": 3, "method": "case2-unbounded"},
}


def _with(path, value):
    raw = copy.deepcopy(BASE)
    sec, key = path.split(".")
    raw[sec][key] = value
    return raw


def test_minimal_config():
    cfg = parse_config(BASE)
    assert isinstance(cfg.model, GeneralModel)
    assert cfg.grid().K == 20 and cfg.seed == 3 and cfg.d == 1


def test_refined_grid_option():
    raw = _with("run.grid", "refined")
    raw["run"]["gamma"] = 3
    g = parse_config(raw).grid()
    assert g.dt[-1] == pytest.approx(20.0 ** -3)


@pytest.mark.parametrize("path,value", [
    ("run.method", "euler"),
    ("run.method", "case1-transform"),
    ("run.method", "case2-bounded"),
    ("run.paths", 0),
    ("run.steps", 1),
    ("run.grid", "log"),
    ("run.seed", -1),
    ("run.seed", 2 ** 64),
    ("bridge.v", [1, 2]),
    ("bridge.T", 0),
    ("model.kind", "nonlinear"),
    ("model.b", ["sin(x1"]),
    ("model.b", ["x2"]),
    ("model.sigma", [["1", "0"]]),
    ("model.dimension", 0),
])
def test_invalid_configs(path, value):
    with pytest.raises(ConfigError):
        parse_config(_with(path, value))


def test_linear_model_rejects_state_dependence():
    raw = {"model": {"kind": "linear", "dimension": 1, "A": [["x1"]], "b": [0], "sigma": [[1]]},
           "bridge": {"u": [0], "v": [1], "T": 1}, "run": {"method": "case1-transform"}}
    with pytest.raises(ConfigError, match="t only"):
        parse_config(raw)
    raw["model"]["A"] = [["-1 - t"]]
    cfg = parse_config(raw)
    assert isinstance(cfg.model, LinearModel)
    assert cfg.model.A(0.5)[0, 0] == -1.5


def test_bridge2d_needs_integrated_bm():
    raw = {"model": {"kind": "linear", "dimension": 1, "A": [[0]], "b": [0], "sigma": [[1]]},
           "bridge": {"u": [0], "v": [1], "T": 1}, "run": {"method": "bridge2d-closed"}}
    with pytest.raises(ConfigError):
        parse_config(raw)
    raw["model"].update({"dimension": 2, "A": [[0, 1], [0, 0]], "b": [0, 0], "sigma": [[0], [2]]})
    raw["bridge"].update({"u": [0, 0], "v": [1, 0]})
    assert parse_config(raw).s2d == 2.0


def test_hash_ignores_threads_and_output_but_not_seed():
    a = parse_config(BASE).config_hash()
    raw = copy.deepcopy(BASE)
    raw["run"]["threads"] = 8
    raw["run"]["chunk_size"] = 7
    raw["output"] = {"directory": "elsewhere"}
    assert parse_config(raw).config_hash() == a
    assert parse_config(with_overrides(BASE, seed=4)).config_hash() != a
    assert len(a) == 16


def test_overrides_do_not_mutate():
    raw = with_overrides(BASE, seed=9, paths=5, steps=7, threads=2)
    assert raw["run"]["seed"] == 9 and raw["run"]["paths"] == 5 and raw["run"]["steps"] == 7
    assert BASE["run"]["seed"] == 3


def test_load_config_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(str(p))
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"))
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(str(p))


def test_functionals_from_config():
    from bridgesim import Path, make_uniform_grid

    g = make_uniform_grid(1.0, 4)
    p = Path(g, np.stack([g.nodes, -g.nodes], axis=1))
    assert build_functional(None, 2, 1.0)(p) == 0.5
    assert build_functional({"kind": "terminal", "coord": 2}, 2, 1.0)(p) == -1.0
    assert build_functional({"kind": "coordinate_at", "t": 0.25}, 2, 1.0)(p) == 0.25
    assert build_functional({"kind": "path_integral", "expr": "x1 + t"}, 2, 1.0)(p) == pytest.approx(1.0)
    for bad in ({"kind": "terminal", "coord": 3}, {"kind": "mode"},
                {"kind": "path_integral", "expr": "x1 +"}):
        with pytest.raises(ConfigError):
            build_functional(bad, 2, 1.0)
