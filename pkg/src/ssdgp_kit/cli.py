"""Command-line experiment harness.

Every subcommand takes ``--config file.json`` (a previous ``manifest.json``
works too), ``--seed``, ``--out DIR`` and ``--jobs N``; any other
``--key value`` pair overrides a parameter of that experiment.  Unknown keys
are rejected.  Each run writes its CSV outputs and a ``manifest.json`` with
the resolved configuration.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("ssdgp_kit")

DEFAULTS = {
    "simulate": {"model": "benes", "scheme": "em", "x0": 0.0, "t1": 5.0, "dt": 0.01, "n_paths": 1,
                 "kappa": 2.0},
    "tme-moments": {"model": "benes", "x0": 0.5, "order": 2, "dt_grid": "0.01:1:50", "kappa": 0.5},
    "pd-analysis": {"model": "softplus", "kappa": 0.49, "x0": [0.0, 0.0], "order": 2, "dt_max": 100.0},
    "filter": {"model": "benes", "scheme": "tme3", "rule": "gh3", "steps": 500, "dt": 0.01, "Xi": 0.5},
    "regress-ssgp": {"data": None, "signal": "rectangular", "T": 100, "Xi": 0.01, "nu": 1.5, "ell": 0.1,
                     "sigma": 1.0, "optimize": False, "check_batch": False},
    "regress-ssdgp": {"data": None, "signal": "composite_sine", "T": 200, "Xi": 0.01, "nu": 1.5,
                      "leaf_ell": 0.2, "leaf_sigma": 2.0, "transform": "exp", "method": "ckf_lcd",
                      "substeps": 1},
    "admm": {"data": None, "signal": "rectangular", "T": 64, "Xi": 0.01, "lam": [0.0, 1.0, 1.0],
             "rho": [0.1, 10.0, 10.0], "iters": 100, "mode": "statespace", "leaf_ell": 0.2,
             "leaf_sigma": 1.0},
    "drift": {"drift": "tanh", "b": 1.0, "n_paths": 20, "n_steps": 100, "dt": 0.01, "scheme": "em",
              "nu": None, "ell": 1.0, "sigma": 1.0, "grid": "-2:2:81"},
    "spectro": {"data": None, "freqs": [5, 10, 15, 20, 25, 30, 35, 40], "f1": 10.0, "f2": 25.0,
                "fs": 100.0, "T": 512, "Xi": 1e-4, "prior": "ou", "ell": 10.0, "sigma": 1.0,
                "resonator_freq": None, "mode": "kf_rts"},
    "vanishing-cov": {"ell": 0.1, "sigma": 0.1, "cross": 0.5, "n_samples": 20000, "t1": 10.0,
                      "dt": 0.01, "scheme": "lcd"},
}


class ConfigError(ValueError):
    pass


# -- config handling ---------------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(tokens) -> dict:
    """``['--a', '1', '--flag', '--b', 'x']`` -> ``{'a': 1, 'flag': True, 'b': 'x'}``."""
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, val = key.split("=", 1)
            out[key] = _parse_value(val)
            i += 1
        elif i + 1 < len(tokens) and not (tokens[i + 1].startswith("--") and len(tokens[i + 1]) > 2
                                          and not _is_number(tokens[i + 1])):
            out[key] = _parse_value(tokens[i + 1])
            i += 2
        else:
            out[key] = True
            i += 1
    return out


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def load_config(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: line {err.lineno}, column {err.colno}: {err.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    allowed = {"experiment", "seed", "params", "outputs", "version", "summary", "out"}
    extra = set(cfg) - allowed
    if extra:
        raise ConfigError(f"{path}: unknown key(s) {sorted(extra)}; allowed {sorted(allowed)}")
    return cfg


def resolve(experiment: str, file_cfg: dict, overrides: dict, seed_flag) -> tuple:
    if experiment not in DEFAULTS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    if file_cfg.get("experiment", experiment) != experiment:
        raise ConfigError(f"config is for experiment {file_cfg['experiment']!r}, not {experiment!r}")
    params = dict(DEFAULTS[experiment])
    for source, values in (("config", file_cfg.get("params", {})), ("command line", overrides)):
        for k, v in values.items():
            if k not in params:
                raise ConfigError(f"unknown key {k!r} from {source} for {experiment}; "
                                  f"allowed: {', '.join(sorted(params))}")
            params[k] = v
    if seed_flag is not None:
        seed = int(seed_flag)
    elif "seed" in file_cfg:
        seed = int(file_cfg["seed"])
    elif os.environ.get("SSDGP_SEED"):
        seed = int(os.environ["SSDGP_SEED"])
    else:
        seed = 0
    return params, seed


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved run: experiment name, parameters, seed and output directory."""

    experiment: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    out: str = ""

    @classmethod
    def from_sources(cls, experiment: str, file_cfg: dict | None = None, overrides: dict | None = None,
                     seed=None, out=None) -> "ExperimentConfig":
        """Merge defaults, a config file and overrides; unknown keys raise :class:`ConfigError`."""
        file_cfg = file_cfg or {}
        params, seed = resolve(experiment, file_cfg, overrides or {}, seed)
        out = out or file_cfg.get("out") or os.path.join("runs", experiment)
        return cls(experiment, params, seed, str(out))


def _grid(spec) -> np.ndarray:
    """``"a:b:n"`` -> ``linspace(a, b, n)``; lists pass through."""
    if isinstance(spec, str):
        a, b, n = spec.split(":")
        return np.linspace(float(a), float(b), int(n))
    return np.atleast_1d(np.asarray(spec, dtype=float))


def _save(path, cols, header):
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=header, comments="", fmt="%.17g")


# -- experiments ---------------------------------------------------------------------------------

def _sde(name, kappa):
    from .sde import benes, duffing_van_der_pol, ornstein_uhlenbeck, softplus_2d
    makers = {"benes": benes, "ou": ornstein_uhlenbeck, "duffing": lambda: duffing_van_der_pol(kappa),
              "softplus": lambda: softplus_2d(kappa)}
    if name not in makers:
        raise ConfigError(f"unknown model {name!r}; choose from {sorted(makers)}")
    return makers[name]()


def _pair(model, scheme):
    from .discretise import euler_maruyama, ito15_scalar
    from .tme import tme_discretise
    s = scheme.lower()
    if s in ("em", "euler_maruyama"):
        return euler_maruyama(model)
    if s == "ito15":
        return ito15_scalar(model)
    if s.startswith("tme"):
        return tme_discretise(model, int(s[3:].strip("()") or 2))
    raise ConfigError(f"unknown scheme {scheme!r}")


def _series(p, seed):
    from . import datasets
    from .io import load_timeseries
    if p.get("data"):
        return load_timeseries(p["data"]), None
    fns = {"rectangular": datasets.rectangular, "composite_sine": datasets.composite_sine}
    if p["signal"] not in fns:
        raise ConfigError(f"unknown signal {p['signal']!r}")
    return datasets.noisy(fns[p["signal"]], int(p["T"]), float(p["Xi"]), seed)


def run_simulate(p, seed, out, jobs):
    from .discretise import simulate
    model = _sde(p["model"], p["kappa"])
    grid = np.arange(0.0, float(p["t1"]) + 0.5 * float(p["dt"]), float(p["dt"]))
    x0 = np.broadcast_to(np.asarray(p["x0"], float), (model.dim_state,))
    res = simulate(model, _pair(model, p["scheme"]), x0, grid, seed, int(p["n_paths"]))
    res.to_csv(out / "paths.csv")
    return ["paths.csv"], {"final_mean": np.mean(res.states[:, -1], axis=0).tolist()}, 0


def run_tme_moments(p, seed, out, jobs):
    from .tme import tme_coefficients
    model = _sde(p["model"], p["kappa"])
    d = model.dim_state
    x0 = np.broadcast_to(np.asarray(p["x0"], float), (d,)).reshape(d, 1)
    c = tme_coefficients(model, x0, int(p["order"]))
    dts = _grid(p["dt_grid"])
    cols, names = [dts], ["dt"]
    means = np.array([c.mean(h)[:, 0] for h in dts])
    covs = np.array([c.cov(h)[:, :, 0] for h in dts])
    for i in range(d):
        cols.append(means[:, i])
        names.append(f"mean_{i + 1}")
    for i in range(d):
        for j in range(i, d):
            cols.append(covs[:, i, j])
            names.append("var" if d == 1 else f"cov_{i + 1}_{j + 1}")
    _save(out / "tme_moments.csv", cols, ",".join(names))
    return ["tme_moments.csv"], {}, 0


def run_pd_analysis(p, seed, out, jobs):
    from .tme import pd_analysis, tme_coefficients
    model = _sde(p["model"], p["kappa"])
    x0 = np.asarray(p["x0"], float).reshape(model.dim_state, 1)
    v = pd_analysis(tme_coefficients(model, x0, int(p["order"])), float(p["dt_max"]))
    res = {"verdict": v.verdict, "method": v.method, "dt": v.dt,
           "polynomial_coeffs": np.asarray(v.polynomial_coeffs).tolist()}
    (out / "pd_analysis.json").write_text(json.dumps(res, indent=2) + "\n", encoding="utf-8")
    return ["pd_analysis.json"], res, 0


def run_filter(p, seed, out, jobs):
    from .discretise import benes_sample, simulate
    from .filtering import MeasurementModel, TimeSeries, gaussian_filter, gaussian_smoother
    model = _sde(p["model"], 2.0)
    if model.dim_state != 1:
        raise ConfigError("filter experiment supports scalar models")
    dt, n = float(p["dt"]), int(p["steps"])
    grid = np.arange(n + 1) * dt
    if p["model"] == "benes":
        x = benes_sample(0.0, grid, seed).states[0, :, 0]
    else:
        x = simulate(model, _pair(model, "em"), [0.0], np.linspace(0, grid[-1], 10 * n + 1), seed).states[0, ::10, 0]
    y = x[1:] + np.sqrt(float(p["Xi"])) * np.random.default_rng([seed, 1]).standard_normal(n)
    data = TimeSeries(grid[1:], y)
    tr = gaussian_filter(_pair(model, p["scheme"]), MeasurementModel(H=[[1.0]], noise=float(p["Xi"])), data,
                         p["rule"], 1, [0.0], [[1.0]], t0=0.0)
    tr = gaussian_smoother(tr)
    tr.to_csv(out / "filter.csv")
    rmse = float(np.sqrt(np.mean((tr.m_filt[1:, 0] - x[1:]) ** 2)))
    return ["filter.csv"], {"rmse_filter": rmse}, 0


def run_regress_ssgp(p, seed, out, jobs):
    from .estimators import SsgpRegressor
    from .ssgp import batch_gp_posterior, matern_gram
    ts, _ = _series(p, seed)
    est = SsgpRegressor(float(p["nu"]), float(p["ell"]), float(p["sigma"]), float(p["Xi"]),
                        bool(p["optimize"])).fit(ts.t, ts.y[:, 0])
    est.track_.to_csv(out / "ssgp.csv")
    summary = {"ell": est.ell_, "sigma": est.sigma_, "loglik": est.track_.loglik}
    code = 0
    if p["check_batch"]:
        m, P = batch_gp_posterior(matern_gram(ts.t, est.model_.params), float(p["Xi"]), ts.y[:, 0])
        keep = est.track_.meas_index >= 0
        dev = max(np.max(np.abs(m - est.track_.m_smooth[keep, 0])),
                  np.max(np.abs(np.diag(P) - est.track_.P_smooth[keep, 0, 0])))
        summary["batch_max_deviation"] = float(dev)
        code = 0 if dev < 1e-6 else 1
    return ["ssgp.csv"], summary, code


def run_regress_ssdgp(p, seed, out, jobs):
    from .estimators import SsdgpRegressor
    ts, truth = _series(p, seed)
    est = SsdgpRegressor(None, float(p["nu"]), float(p["leaf_ell"]), float(p["leaf_sigma"]), p["transform"],
                         p["method"], float(p["Xi"]), int(p["substeps"])).fit(ts.t, ts.y[:, 0])
    s = est.summary_
    cols = [ts.t]
    names = ["t"]
    for i, e in s.items():
        cols += [e["mean"], e["var"], e["ell"], e["sigma"]]
        names += [f"u{i}_mean", f"u{i}_var", f"ell{i}", f"sigma{i}"]
    _save(out / "ssdgp.csv", cols, ",".join(names))
    summary = {"loglik": est.track_.loglik, "events": len(est.track_.events)}
    if truth is not None:
        summary["rmse"] = float(np.sqrt(np.mean((s[1]["mean"] - truth) ** 2)))
    return ["ssdgp.csv"], summary, 0


def run_admm(p, seed, out, jobs):
    from .admm import RegProblem, admm_solve, map_uncertainty
    from .ssgp import MaternParams
    ts, truth = _series(p, seed)
    leaf = MaternParams(0.5, float(p["leaf_ell"]), float(p["leaf_sigma"]))
    prob = RegProblem(ts.t, ts.y[:, 0], float(p["Xi"]), p["lam"], p["rho"], None, p["mode"], 0.5, leaf, leaf)
    res = admm_solve(prob, iters=int(p["iters"]))
    res.to_csv(out / "admm_solution.csv", ts.t)
    res.convergence_csv(out / "admm_convergence.csv")
    m, v = map_uncertainty(res.u2, res.u3, prob)[:2]
    _save(out / "admm_posterior.csv", [ts.t, m, v], "t,mean,var")
    th = res.state.theta[1:]
    summary = {"final_lagrangian": res.state.history[-1], "primal_residual": res.state.residuals[-1],
               "theta_sparsity": float(np.mean(th == 0))}
    return ["admm_solution.csv", "admm_convergence.csv", "admm_posterior.csv"], summary, 0


_DRIFTS = {"tanh": np.tanh, "cubic": lambda x: 3 * (x - x**3)}


def run_drift(p, seed, out, jobs):
    from .apps import drift_dataset, drift_estimate_em, drift_estimate_ito15
    from .datasets import drift_paths
    from .ssgp import MaternParams
    if p["drift"] not in _DRIFTS:
        raise ConfigError(f"unknown drift {p['drift']!r}")
    fn = _DRIFTS[p["drift"]]
    paths = drift_paths(fn, float(p["b"]), int(p["n_paths"]), int(p["n_steps"]), float(p["dt"]), seed)
    data = drift_dataset(paths, float(p["b"]), dt=float(p["dt"]))
    nu = p["nu"] if p["nu"] is not None else (2.5 if p["scheme"] == "ito15" else 1.5)
    prior = MaternParams(float(nu), float(p["ell"]), float(p["sigma"]))
    grid = _grid(p["grid"])
    est = (drift_estimate_ito15 if p["scheme"] == "ito15" else drift_estimate_em)(data, prior, grid)
    est.to_csv(out / "drift.csv")
    rmse = float(np.sqrt(np.mean((est.mean - fn(grid)) ** 2)))
    return ["drift.csv"], {"rmse": rmse, "n_samples": len(data)}, 0


def run_spectro(p, seed, out, jobs):
    from .apps import build_fourier_ssm, spectro_estimate
    from .datasets import two_tone
    from .filtering import TimeSeries
    from .io import load_timeseries
    if p["data"]:
        ts = load_timeseries(p["data"])
    else:
        t = np.arange(int(p["T"])) / float(p["fs"])
        ts = TimeSeries(t, two_tone(t, float(p["f1"]), float(p["f2"])))
    rf = p["resonator_freq"]
    ssm = build_fourier_ssm(p["freqs"], p["prior"], float(p["ell"]), float(p["sigma"]),
                            None if rf is None else float(rf))
    res = spectro_estimate(ssm, ts, float(p["Xi"]), p["mode"])
    res.to_csv(out / "spectro.csv")
    return ["spectro.csv"], {"final_magnitude": res.magnitude[-1].tolist()}, 0


def run_vanishing_cov(p, seed, out, jobs):
    from .ssdgp import example_nu12, make_pair, mc_cross_covariance
    model = example_nu12(float(p["ell"]), float(p["sigma"]))
    C = np.eye(model.dim_state)
    C[0, 2] = C[2, 0] = float(p["cross"])
    grid = np.arange(0.0, float(p["t1"]) + 0.5 * float(p["dt"]), float(p["dt"]))
    r = mc_cross_covariance(model, make_pair(model, p["scheme"]), grid, int(p["n_samples"]), seed,
                            (1, 3), C, jobs=jobs)
    _save(out / "vanishing_cov.csv", [r.times, r.cov, r.se], "t,cov,se")
    return ["vanishing_cov.csv"], {"cov_t0": float(r.cov[0]), "cov_final": float(r.cov[-1])}, 0


RUNNERS = {
    "simulate": run_simulate,
    "tme-moments": run_tme_moments,
    "pd-analysis": run_pd_analysis,
    "filter": run_filter,
    "regress-ssgp": run_regress_ssgp,
    "regress-ssdgp": run_regress_ssdgp,
    "admm": run_admm,
    "drift": run_drift,
    "spectro": run_spectro,
    "vanishing-cov": run_vanishing_cov,
}


def run(config: ExperimentConfig, jobs: int = 1) -> int:
    """Run one experiment, write its outputs and manifest, return the exit code."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs, summary, code = RUNNERS[config.experiment](config.params, config.seed, out, max(1, int(jobs)))
    manifest = {"experiment": config.experiment, "seed": config.seed, "params": config.params,
                "outputs": outputs, "summary": summary, "version": __version__}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return code


def gnuplot_script(csv_path, x: str, ys) -> str:
    """Gnuplot commands that plot columns ``ys`` of a headed CSV against ``x``."""
    with open(csv_path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    missing = [c for c in [x, *ys] if c not in header]
    if missing:
        raise ConfigError(f"{csv_path}: no column(s) {missing}")
    ix = header.index(x) + 1
    plots = ", ".join(f"'{csv_path}' using {ix}:{header.index(y) + 1} with lines title '{y}'" for y in ys)
    return "\n".join(["set datafile separator ','", "set key autotitle columnhead",
                      f"set xlabel '{x}'", f"plot {plots}", ""])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ssdgp-kit", description="SDE, TME and SS-DGP experiment runner")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="experiment", required=True)
    for name in RUNNERS:
        sp = sub.add_parser(name, help=f"run the {name} experiment (extra --key value pairs override params)")
        sp.add_argument("--config", help="JSON config or manifest")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory (default: runs/<experiment>)")
        sp.add_argument("--jobs", type=int, default=1)
    pl = sub.add_parser("plot-script", help="print a gnuplot script for a CSV output")
    pl.add_argument("csv")
    pl.add_argument("--x", required=True)
    pl.add_argument("--y", required=True, nargs="+")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.experiment == "plot-script":
            if extra:
                raise ConfigError(f"unexpected arguments {extra}")
            sys.stdout.write(gnuplot_script(args.csv, args.x, args.y))
            return 0
        file_cfg = load_config(args.config) if args.config else {}
        cfg = ExperimentConfig.from_sources(args.experiment, file_cfg, parse_overrides(extra), args.seed, args.out)
        return run(cfg, args.jobs)
    except (ConfigError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # module errors surface verbatim
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
