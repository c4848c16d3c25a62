import json
import os

import pytest

from geotransport.cli import build_parser, main

TINY = """
[geometry]
dim = 2
R_M = 1.0
R_M0 = 1.2

[coefficients]
a = { family = "isotropic", field = { type = "bump", amplitude = 0.5, width = 0.5 } }
k = { family = "isotropic", field = { type = "bump", amplitude = 0.2, width = 0.4 } }

[coefficients_tilde]
a = { family = "isotropic", field = { type = "bump", amplitude = 0.52, width = 0.5 } }
k = { family = "isotropic", field = { type = "bump", amplitude = 0.2, width = 0.4 } }

[gauge]
type = "polynomial"
strength = 0.3

[perturbation]
da = { family = "isotropic", field = { type = "bump", amplitude = 1.0, width = 0.5 } }

[grids]
spacing = 0.12
ndir = 24
boundary = 24
direction = 8
nt = 24

[experiment]
nsamples = 3
deltas = [0.02]
refine = false
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text(TINY)
    return str(p)


def _json(path):
    with open(path) as f:
        return json.load(f)


def test_parser_flags():
    a = build_parser().parse_args(["forward", "--config", "c.toml", "--seed", "18446744073709551615",
                                   "--grid-scale", "1.5", "--out", "o"])
    assert a.seed == 2 ** 64 - 1 and a.grid_scale == 1.5 and a.out == "o"
    with pytest.raises(SystemExit):
        build_parser().parse_args(["forward", "--config", "c", "--seed", "-1"])
    with pytest.raises(SystemExit):
        build_parser().parse_args(["bogus", "--config", "c"])


def test_geometry_diag(cfg, tmp_path, capsys):
    assert main(["geometry-diag", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert "diam = 2" in capsys.readouterr().out
    r = _json(tmp_path / "geometry.json")
    assert r["simplicity"]["convex"] and r["schema_version"] == 1
    assert abs(r["estimates"]["diam"] - 2.0) < 1e-8
    assert r["config"]["geometry"]["R_M0"] == 1.2


def test_forward(cfg, tmp_path):
    assert main(["forward", "--config", cfg, "--out", str(tmp_path)]) == 0
    r = _json(tmp_path / "forward.json")
    assert r["converged"] and r["margin"] > 0
    assert r["outgoing_L1"]["total"] > r["outgoing_L1"]["scattered"] > 0


def test_gauge_check(cfg, tmp_path, capsys):
    assert main(["gauge-check", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert "opnorm" in capsys.readouterr().out
    r = _json(tmp_path / "gauge_check.json")
    assert r["rows"][0]["epsilon"] <= r["tolerance"]


def test_albedo_norm(cfg, tmp_path):
    assert main(["albedo-norm", "--config", cfg, "--out", str(tmp_path), "--seed", "3"]) == 0
    r = _json(tmp_path / "albedo_norm.json")
    assert r["opnorm"]["epsilon"] > 0 and r["seed"] == 3


def test_config_error_json(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text(TINY.replace("R_M = 1.0", "R_M = -1.0"))
    assert main(["forward", "--config", str(p), "--out", str(tmp_path)]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ConfigError" and "geometry.R_M" in err["message"]


def test_missing_file_error_json(tmp_path, capsys):
    assert main(["forward", "--config", str(tmp_path / "none.toml")]) != 0
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "FileNotFoundError"


def test_stability_deterministic_csv(cfg, tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        assert main(["stability", "--config", cfg, "--out", str(o), "--seed", "11"]) == 0
    a, b = [(o / "sweep.csv").read_bytes() for o in outs]
    assert a == b
    assert a.splitlines()[0] == b"delta,epsilon,delta_upper,C,C_eps,verdict"
    rep = _json(outs[0] / "report.json")
    assert rep["schema_version"] == 1 and rep["config"]["experiment"]["deltas"] == [0.02]
    assert os.path.exists(outs[0] / "report.json")
