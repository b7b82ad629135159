"""Estimator wrappers with the familiar ``fit``/``predict``/``transform`` interface."""
from __future__ import annotations

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .admm import RegProblem, admm_solve, map_estimate, map_uncertainty
from .apps import build_fourier_ssm, drift_dataset, drift_estimate_em, drift_estimate_ito15, spectro_estimate
from .filtering import MeasurementModel, TimeSeries, kalman_filter
from .ssdgp import Transform, assemble, build_graph, element_summary, ssdgp_regress
from .ssgp import MaternParams, matern_ssm, ssgp_regress

__all__ = [
    "SsgpRegressor",
    "SsdgpRegressor",
    "MapSsdgpRegressor",
    "DriftRegressor",
    "SpectrogramTransformer",
    "check_series",
]


def check_series(t, y=None):
    """Validate a 1-D time axis (and matching observations)."""
    t = np.asarray(t, dtype=float)
    if t.ndim == 2 and t.shape[1] == 1:
        t = t[:, 0]
    if t.ndim != 1:
        raise ValueError(f"expected a 1-D time axis, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("time axis contains non-finite values")
    if y is None:
        return t
    y = np.asarray(y, dtype=float).ravel()
    if y.size != t.size:
        raise ValueError(f"t has {t.size} rows but y has {y.size}")
    return t, y


def _posterior_at(track, t_new):
    t_new = check_series(t_new)
    pos = np.clip(np.searchsorted(track.t, t_new), 0, track.t.size - 1)
    if np.any(np.abs(track.t[pos] - t_new) > 1e-12 * np.maximum(1.0, np.abs(t_new))):
        raise ValueError("prediction times must be passed to fit (pred_times) or coincide with data")
    return track.m_smooth[pos, 0], np.sqrt(np.maximum(track.P_smooth[pos, 0, 0], 0.0))


class SsgpRegressor(BaseEstimator, RegressorMixin):
    """Matérn GP regression through Kalman filtering and RTS smoothing.

    With ``optimize=True`` the length scale and magnitude are fitted by
    maximising the Kalman-filter marginal likelihood.
    """

    def __init__(self, nu=1.5, ell=1.0, sigma=1.0, noise=0.01, optimize=False):
        self.nu = nu
        self.ell = ell
        self.sigma = sigma
        self.noise = noise
        self.optimize = optimize

    def _loglik(self, ts, ell, sigma):
        mod = matern_ssm(MaternParams(self.nu, ell, sigma))
        return kalman_filter(mod.linear_model(), MeasurementModel(H=mod.H, noise=self.noise), ts).loglik

    def fit(self, t, y):
        t, y = check_series(t, y)
        self.series_ = ts = TimeSeries(t, y)
        ell, sigma = self.ell, self.sigma
        if self.optimize:
            starts = ([np.log(ell), np.log(sigma)], [np.log(ell / 10), np.log(sigma)])
            best = min((minimize(lambda p: -self._loglik(ts, *np.exp(p)), s, method="Nelder-Mead")
                        for s in starts), key=lambda r: r.fun)
            ell, sigma = np.exp(best.x)
        self.ell_, self.sigma_ = float(ell), float(sigma)
        self.model_ = matern_ssm(MaternParams(self.nu, self.ell_, self.sigma_))
        self.track_ = ssgp_regress(self.model_, ts, self.noise)
        return self

    def predict(self, t, return_std=False):
        check_is_fitted(self, "track_")
        t = check_series(t)
        if not np.all(np.isin(t, self.track_.t)):
            tr = ssgp_regress(self.model_, self.series_, self.noise, pred_times=t)
        else:
            tr = self.track_
        m, s = _posterior_at(tr, t)
        return (m, s) if return_std else m


def _three_element_spec(nu, ell, sigma, transform):
    return [
        {"index": 1, "parent_of": 0, "nu": nu, "parents": {"length_scale": 2, "magnitude": 3},
         "transform": transform},
        {"index": 2, "parent_of": 1, "nu": 0.5, "fixed": {"ell": ell, "sigma": sigma}},
        {"index": 3, "parent_of": 1, "nu": 0.5, "fixed": {"ell": ell, "sigma": sigma}},
    ]


class SsdgpRegressor(BaseEstimator, RegressorMixin):
    """SS-DGP regression by Gaussian filtering and smoothing of the joint state.

    ``graph`` is a graph specification (see :func:`ssdgp_kit.ssdgp.build_graph`);
    when omitted a three-element model is built from ``nu``, ``leaf_ell``,
    ``leaf_sigma`` and ``transform``.
    """

    def __init__(self, graph=None, nu=1.5, leaf_ell=0.2, leaf_sigma=2.0, transform="exp",
                 method="ckf_lcd", noise=0.01, substeps=1):
        self.graph = graph
        self.nu = nu
        self.leaf_ell = leaf_ell
        self.leaf_sigma = leaf_sigma
        self.transform = transform
        self.method = method
        self.noise = noise
        self.substeps = substeps

    def fit(self, t, y, pred_times=None):
        t, y = check_series(t, y)
        spec = self.graph or _three_element_spec(self.nu, self.leaf_ell, self.leaf_sigma, self.transform)
        self.model_ = assemble(build_graph(spec))
        self.track_ = ssdgp_regress(self.model_, TimeSeries(t, y), self.noise, self.method,
                                    substeps=self.substeps, pred_times=pred_times)
        self.summary_ = element_summary(self.model_, self.track_)
        return self

    def predict(self, t, return_std=False):
        check_is_fitted(self, "track_")
        m, s = _posterior_at(self.track_, t)
        return (m, s) if return_std else m

    def length_scale(self, t):
        """Length scale of the observed element, ``g(posterior mean)``."""
        check_is_fitted(self, "track_")
        pos = np.clip(np.searchsorted(self.track_.t, check_series(t)), 0, self.track_.t.size - 1)
        return self.summary_[1]["ell"][pos]


class MapSsdgpRegressor(BaseEstimator, RegressorMixin):
    """MAP (optionally L1-regularised through ADMM) estimate of a three-element SS-DGP.

    With all ``lam`` zero the objective is minimised directly; otherwise
    :func:`ssdgp_kit.admm.admm_solve` runs ``iters`` iterations.  Predictions
    off the training grid interpolate the posterior linearly.
    """

    def __init__(self, lam=(0.0, 0.0, 0.0), rho=None, mode="statespace", nu=0.5, leaf_ell=0.2,
                 leaf_sigma=1.0, transform="exp", noise=0.01, iters=100):
        self.lam = lam
        self.rho = rho
        self.mode = mode
        self.nu = nu
        self.leaf_ell = leaf_ell
        self.leaf_sigma = leaf_sigma
        self.transform = transform
        self.noise = noise
        self.iters = iters

    def fit(self, t, y):
        t, y = check_series(t, y)
        leaf = MaternParams(0.5, self.leaf_ell, self.leaf_sigma)
        self.problem_ = p = RegProblem(t, y, self.noise, self.lam, self.rho, None, self.mode, self.nu,
                                       leaf, leaf, Transform(self.transform))
        if np.all(p.lam == 0):
            self.u1_, self.u2_, self.u3_, _ = map_estimate(p)
            self.result_ = None
        else:
            self.result_ = admm_solve(p, iters=self.iters)
            self.u1_, self.u2_, self.u3_ = self.result_.u1, self.result_.u2, self.result_.u3
        out = map_uncertainty(self.u2_, self.u3_, p)
        self.mean_, self.var_ = out[0], out[1]
        return self

    def predict(self, t, return_std=False):
        check_is_fitted(self, "mean_")
        t = check_series(t)
        m = np.interp(t, self.problem_.t, self.mean_)
        s = np.sqrt(np.interp(t, self.problem_.t, np.maximum(self.var_, 0.0)))
        return (m, s) if return_std else m


class DriftRegressor(BaseEstimator, RegressorMixin):
    """Drift-function estimation from sampled scalar paths.

    ``fit`` takes a list of paths (or one path) and the sampling step;
    ``predict`` evaluates the drift posterior at states ``x``.
    """

    def __init__(self, scheme="em", nu=None, ell=1.0, sigma=1.0, b=1.0):
        self.scheme = scheme
        self.nu = nu
        self.ell = ell
        self.sigma = sigma
        self.b = b

    def fit(self, paths, dt):
        if self.scheme not in ("em", "ito15"):
            raise ValueError("scheme must be 'em' or 'ito15'")
        self.data_ = drift_dataset(paths, self.b, dt=dt)
        nu = self.nu if self.nu is not None else (2.5 if self.scheme == "ito15" else 1.5)
        self.prior_ = MaternParams(nu, self.ell, self.sigma)
        return self

    def predict(self, x, return_std=False):
        check_is_fitted(self, "data_")
        x = check_series(x)
        fn = drift_estimate_ito15 if self.scheme == "ito15" else drift_estimate_em
        est = fn(self.data_, self.prior_, x)
        return (est.mean, np.sqrt(est.var)) if return_std else est.mean


class SpectrogramTransformer(BaseEstimator, TransformerMixin):
    """Spectrogram magnitudes from tracked Fourier coefficients.

    ``transform(t, y)`` returns an array ``(T, n_freq)`` of
    ``sqrt(alpha^2 + beta^2)``.
    """

    def __init__(self, freqs=(1.0,), prior="ou", ell=10.0, sigma=1.0, noise=1e-3, mode="kf_rts",
                 resonator_freq=None):
        self.freqs = freqs
        self.prior = prior
        self.resonator_freq = resonator_freq
        self.ell = ell
        self.sigma = sigma
        self.noise = noise
        self.mode = mode

    def fit(self, t=None, y=None):
        self.ssm_ = build_fourier_ssm(self.freqs, self.prior, self.ell, self.sigma, self.resonator_freq)
        return self

    def transform(self, t, y=None):
        check_is_fitted(self, "ssm_")
        t, y = check_series(t, y)
        self.result_ = spectro_estimate(self.ssm_, TimeSeries(t, y), self.noise, self.mode)
        return self.result_.magnitude

    def fit_transform(self, t, y=None, **fit_params):
        return self.fit(t, y).transform(t, y)
