import json
import shutil
import subprocess

import numpy as np
import pytest

from ssdgp_kit.cli import ConfigError, main, parse_overrides, resolve
from ssdgp_kit.io import DataFormatError, load_timeseries

# -- CSV input -----------------------------------------------------------------


def test_load_three_rows(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("t,y\n0.0,1.0\n0.5,2.0\n1.0,3.0\n")
    ts = load_timeseries(f)
    np.testing.assert_array_equal(ts.t, [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(ts.y[:, 0], [1.0, 2.0, 3.0])


def test_load_multi_output(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("t,y1,y2\n0,1,2\n1,3,4\n")
    assert load_timeseries(f).y.shape == (2, 2)


@pytest.mark.parametrize("body, msg", [
    ("t,y\n0,1\n2,1\n1,1\n", "row 4"),
    ("t,y\n", "no data rows"),
    ("", "no data rows"),
    ("t,y\n0,1\n1,nan\n", "NaN"),
    ("t,y\n0,1\n1,abc\n", "not a number"),
    ("x,y\n0,1\n", "header"),
    ("t,y\n0,1,2\n", "cells"),
])
def test_load_errors(tmp_path, body, msg):
    f = tmp_path / "d.csv"
    f.write_text(body)
    with pytest.raises(DataFormatError, match=msg):
        load_timeseries(f)


# -- override parsing ------------------------------------------------------------

def test_parse_overrides():
    got = parse_overrides(["--order", "3", "--check-batch", "--lam=[0,1,1]", "--x0", "-0.5", "--model", "benes"])
    assert got == {"order": 3, "check_batch": True, "lam": [0, 1, 1], "x0": -0.5, "model": "benes"}
    with pytest.raises(ConfigError):
        parse_overrides(["order", "3"])


def test_seed_precedence(monkeypatch):
    monkeypatch.setenv("SSDGP_SEED", "7")
    assert resolve("simulate", {}, {}, None)[1] == 7
    assert resolve("simulate", {"seed": 3}, {}, None)[1] == 3
    assert resolve("simulate", {"seed": 3}, {}, 11)[1] == 11
    monkeypatch.delenv("SSDGP_SEED")
    assert resolve("simulate", {}, {}, None)[1] == 0


# -- commands ------------------------------------------------------------------

def _csv(path):
    return np.genfromtxt(path, delimiter=",", names=True)


def test_tme_moments_second_order(tmp_path):
    rc = main(["tme-moments", "--out", str(tmp_path), "--x0", "0.5", "--order", "2", "--dt-grid", "0.1:1:10"])
    assert rc == 0
    d = _csv(tmp_path / "tme_moments.csv")
    s = 1 - np.tanh(0.5) ** 2
    np.testing.assert_allclose(d["mean_1"], 0.5 + np.tanh(0.5) * d["dt"], atol=1e-12)
    np.testing.assert_allclose(d["var"], d["dt"] + s * d["dt"] ** 2, atol=1e-12)


def test_repeat_runs_byte_identical(tmp_path):
    args = ["simulate", "--n-paths", "3", "--t1", "1.0", "--seed", "5"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("paths.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_manifest_round_trip(tmp_path):
    assert main(["filter", "--steps", "50", "--seed", "2", "--out", str(tmp_path / "a")]) == 0
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert set(man) == {"experiment", "seed", "params", "outputs", "summary", "version"}
    assert man["seed"] == 2 and man["params"]["steps"] == 50
    assert main(["filter", "--config", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "filter.csv").read_bytes() == (tmp_path / "b" / "filter.csv").read_bytes()


def test_unknown_key_exit_code(tmp_path, capsys):
    assert main(["simulate", "--bogus", "1", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "bogus" in err and "allowed" in err


def test_config_json_error_location(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{\n  "params": {"x0": 1,}\n}\n')
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_config_wrong_experiment(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"experiment": "admm"}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_exit_codes_config_vs_module(tmp_path, capsys):
    assert main(["simulate", "--model", "nope", "--out", str(tmp_path)]) == 2
    assert main(["admm", "--Xi", "0", "--out", str(tmp_path)]) == 1
    assert "ValueError" in capsys.readouterr().err


def test_check_batch(tmp_path):
    assert main(["regress-ssgp", "--T", "60", "--check-batch", "--out", str(tmp_path)]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["summary"]["batch_max_deviation"] < 1e-6


def test_data_file_input(tmp_path):
    t = np.linspace(0, 1, 30)
    np.savetxt(tmp_path / "d.csv", np.column_stack([t, np.sin(4 * t)]), delimiter=",", header="t,y", comments="")
    assert main(["regress-ssgp", "--data", str(tmp_path / "d.csv"), "--out", str(tmp_path / "o")]) == 0
    assert main(["regress-ssgp", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "o")]) == 2


def test_plot_script(tmp_path, capsys):
    main(["tme-moments", "--out", str(tmp_path)])
    capsys.readouterr()
    assert main(["plot-script", str(tmp_path / "tme_moments.csv"), "--x", "dt", "--y", "var"]) == 0
    out = capsys.readouterr().out
    assert "using 1:3" in out and "separator ','" in out
    assert main(["plot-script", str(tmp_path / "tme_moments.csv"), "--x", "dt", "--y", "nope"]) == 2


def test_jobs_invariance(tmp_path):
    base = ["vanishing-cov", "--n-samples", "2000", "--t1", "0.5", "--seed", "1"]
    assert main(base + ["--out", str(tmp_path / "a")]) == 0
    assert main(base + ["--jobs", "2", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "vanishing_cov.csv").read_bytes() == (tmp_path / "b" / "vanishing_cov.csv").read_bytes()


@pytest.mark.skipif(shutil.which("ssdgp-kit") is None, reason="console script not installed")
def test_console_script(tmp_path):
    r = subprocess.run(["ssdgp-kit", "pd-analysis", "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    res = json.loads((tmp_path / "pd_analysis.json").read_text())
    assert res["verdict"] == "pd_for_all_dt" and res["method"] == "corollary_2"


def test_experiment_config_programmatic(tmp_path):
    from ssdgp_kit.cli import ExperimentConfig, run
    cfg = ExperimentConfig.from_sources("pd-analysis", {"params": {"kappa": 0.6}}, {"order": 2}, 4, tmp_path)
    assert cfg.params["kappa"] == 0.6 and cfg.seed == 4
    assert run(cfg) == 0
    assert json.loads((tmp_path / "pd_analysis.json").read_text())["verdict"] == "not_pd_at"
    with pytest.raises(ConfigError):
        ExperimentConfig.from_sources("pd-analysis", {}, {"nope": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_sources("fly")
