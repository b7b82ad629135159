"""Continuous-discrete Kalman and sigma-point Gaussian filters and smoothers."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .discretise import TransitionPair, exact_linear, psd_sqrt
from .sde import LinearSdeModel

logger = logging.getLogger(__name__)

__all__ = [
    "TimeSeries",
    "MeasurementModel",
    "PosteriorTrack",
    "QuadratureRule",
    "make_rule",
    "chol_jitter",
    "kalman_filter",
    "rts_smoother",
    "gaussian_filter",
    "gaussian_smoother",
    "build_grid",
]


# -- containers ------------------------------------------------------------

@dataclass
class TimeSeries:
    """Measurements ``y`` of shape ``(T, dy)`` at strictly increasing times.

    ``noise`` optionally holds per-step measurement covariances
    ``(T, dy, dy)`` which take precedence over the measurement model.
    """

    t: np.ndarray
    y: np.ndarray
    noise: Optional[np.ndarray] = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        self.y = y
        if self.y.shape[0] != self.t.size:
            raise ValueError("t and y lengths differ")
        bad = np.nonzero(np.diff(self.t) <= 0)[0]
        if bad.size:
            raise ValueError(f"time stamps must be strictly increasing (row {bad[0] + 1})")
        if self.noise is not None:
            n = np.asarray(self.noise, dtype=float)
            if n.ndim == 1:
                n = n[:, None, None]
            self.noise = n

    def __len__(self):
        return self.t.size

    @property
    def dim(self) -> int:
        return self.y.shape[1]


@dataclass
class MeasurementModel:
    """``y_k = h(x_k) + xi_k`` with ``xi_k ~ N(0, noise_k)``.

    Parameters
    ----------
    H : ndarray or callable, optional
        Linear measurement matrix ``(dy, d)`` or ``H(k)``.
    noise : float, ndarray or callable
        Scalar, ``(dy, dy)``, per-step ``(T, dy, dy)`` or ``noise(k, m, P)``
        evaluated on the predictive moments.
    h : callable, optional
        Nonlinear map ``h(x, k)`` from ``(d, n)`` to ``(dy, n)``.
    """

    H: Union[np.ndarray, Callable, None] = None
    noise: Union[float, np.ndarray, Callable] = 0.0
    h: Optional[Callable] = None
    dim_y: Optional[int] = None

    def __post_init__(self):
        if self.H is None and self.h is None:
            raise ValueError("either H or h must be given")
        if self.H is not None and not callable(self.H):
            self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
            self.dim_y = self.H.shape[0]
        if not callable(self.noise):
            n = np.asarray(self.noise, dtype=float)
            if n.ndim == 0:
                n = n.reshape(1, 1) * np.eye(self.dim_y or 1)
            self.noise = n

    @property
    def linear(self) -> bool:
        return self.h is None

    def H_at(self, k: int) -> np.ndarray:
        return np.atleast_2d(self.H(k)) if callable(self.H) else self.H

    def R_at(self, k: int, m=None, P=None, data: Optional[TimeSeries] = None) -> np.ndarray:
        if data is not None and data.noise is not None:
            R = data.noise[k]
        elif callable(self.noise):
            R = self.noise(k, m, P)
        elif self.noise.ndim == 3:
            R = self.noise[k]
        else:
            R = self.noise
        R = np.atleast_2d(np.asarray(R, dtype=float))
        if np.linalg.eigvalsh(0.5 * (R + R.T))[0] < -1e-12:
            raise ValueError(f"measurement noise covariance is not PSD at step {k}")
        return R

    def h_at(self, x: np.ndarray, k: int) -> np.ndarray:
        if self.h is not None:
            return np.atleast_2d(self.h(x, k))
        return self.H_at(k) @ x


@dataclass
class PosteriorTrack:
    """Predictive, filtering and smoothing moments on a time grid.

    Arrays are indexed by grid step.  ``meas_index[k]`` is the measurement row
    used at step ``k`` or ``-1`` for pure prediction steps.  ``D[k]`` is the
    cross-covariance of the states at steps ``k - 1`` and ``k`` given data up
    to ``k - 1``.
    """

    t: np.ndarray
    meas_index: np.ndarray
    m_pred: np.ndarray
    P_pred: np.ndarray
    m_filt: np.ndarray
    P_filt: np.ndarray
    D: np.ndarray
    gain: list
    loglik_inc: np.ndarray
    m_smooth: Optional[np.ndarray] = None
    P_smooth: Optional[np.ndarray] = None
    events: list = field(default_factory=list)

    @property
    def loglik(self) -> float:
        return float(self.loglik_inc.sum())

    @property
    def dim(self) -> int:
        return self.m_pred.shape[1]

    def at(self, idx) -> "PosteriorTrack":
        """Sub-track at the given grid steps."""
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return PosteriorTrack(self.t[idx], self.meas_index[idx], self.m_pred[idx], self.P_pred[idx],
                              self.m_filt[idx], self.P_filt[idx], self.D[idx],
                              [self.gain[i] for i in np.atleast_1d(idx)], self.loglik_inc[idx],
                              pick(self.m_smooth), pick(self.P_smooth), list(self.events))

    def measurements(self) -> "PosteriorTrack":
        """Sub-track at the measurement times."""
        return self.at(np.nonzero(self.meas_index >= 0)[0])

    def at_times(self, times) -> "PosteriorTrack":
        times = np.asarray(times, dtype=float)
        idx = np.searchsorted(self.t, times)
        idx = np.clip(idx, 0, self.t.size - 1)
        if not np.allclose(self.t[idx], times, rtol=0, atol=1e-9 * max(1.0, np.abs(self.t).max())):
            raise ValueError("requested times are not on the track grid")
        return self.at(idx)

    def to_csv(self, path) -> None:
        d = self.dim
        cols = ["k", "t"]
        for tag in ("pred", "filt", "smooth"):
            cols += [f"m_{tag}{i + 1}" for i in range(d)] + [f"var_{tag}{i + 1}" for i in range(d)]
        cols.append("loglik")
        ms = self.m_smooth if self.m_smooth is not None else np.full_like(self.m_filt, np.nan)
        Ps = self.P_smooth if self.P_smooth is not None else np.full_like(self.P_filt, np.nan)
        cum = np.cumsum(self.loglik_inc)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for k in range(self.t.size):
                row = [k, repr(float(self.t[k]))]
                for m, P in ((self.m_pred, self.P_pred), (self.m_filt, self.P_filt), (ms, Ps)):
                    row += [repr(float(v)) for v in m[k]] + [repr(float(v)) for v in np.diagonal(P[k])]
                row.append(repr(float(cum[k])))
                w.writerow(row)


# -- quadrature --------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Unit-Gaussian sigma points ``nodes`` ``(n, dim)`` with mean/covariance weights."""

    family: str
    nodes: np.ndarray
    wm: np.ndarray
    wc: np.ndarray

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    def integrate(self, fn: Callable, m=None, P=None) -> np.ndarray:
        """``E[fn(X)]`` for ``X ~ N(m, P)``; ``fn`` maps ``(dim, n)`` to ``(..., n)``."""
        m = np.zeros(self.dim) if m is None else np.asarray(m, float)
        L = np.eye(self.dim) if P is None else psd_sqrt(np.atleast_2d(P))
        X = m[:, None] + L @ self.nodes.T
        return np.asarray(fn(X)) @ self.wm


def make_rule(family: str, dim: int, order: int = 3, alpha: float = 1.0, beta: float = 0.0,
              lam: Optional[float] = None) -> QuadratureRule:
    """Sigma-point rule for ``N(0, I_dim)``.

    Parameters
    ----------
    family : {"gauss_hermite", "unscented", "cubature"}
        Aliases ``"gh"``, ``"ghN"`` (order ``N``), ``"ut"``, ``"ckf"`` are
        accepted.
    dim : int
    order : int
        One-dimensional Gauss--Hermite order (tensor grid).
    alpha, beta, lam : float
        Unscented parameters; ``lam`` defaults to ``3 - dim``.
    """
    if dim < 1:
        raise ValueError("dim must be positive")
    fam = family.lower()
    if fam.startswith("gh") and fam[2:].isdigit():
        fam, order = "gauss_hermite", int(fam[2:])
    fam = {"gh": "gauss_hermite", "ut": "unscented", "ukf": "unscented", "ckf": "cubature",
           "spherical_cubature": "cubature"}.get(fam, fam)
    if fam == "gauss_hermite":
        x1, w1 = np.polynomial.hermite_e.hermegauss(order)
        w1 = w1 / np.sqrt(2 * np.pi)
        nodes = np.array(list(product(x1, repeat=dim)))
        w = np.prod(np.array(list(product(w1, repeat=dim))), axis=1)
        return QuadratureRule(f"gauss_hermite({order})", nodes, w, w)
    if fam == "cubature":
        nodes = np.sqrt(dim) * np.vstack([np.eye(dim), -np.eye(dim)])
        w = np.full(2 * dim, 1.0 / (2 * dim))
        return QuadratureRule("cubature", nodes, w, w)
    if fam == "unscented":
        lam = 3.0 - dim if lam is None else float(lam)
        kappa = lam / alpha**2 - dim
        lam_a = alpha**2 * (dim + kappa)
        c = np.sqrt(dim + lam_a)
        nodes = np.vstack([np.zeros(dim), c * np.eye(dim), -c * np.eye(dim)])
        wm = np.full(2 * dim + 1, 1.0 / (2 * (dim + lam_a)))
        wm[0] = lam_a / (dim + lam_a)
        wc = wm.copy()
        wc[0] += 1 - alpha**2 + beta
        return QuadratureRule(f"unscented({alpha},{beta},{lam})", nodes, wm, wc)
    raise ValueError(f"unsupported quadrature family {family!r}")


# -- linear algebra helpers -----------------------------------------------------

def chol_jitter(S: np.ndarray, what: str = "matrix", step: Optional[int] = None):
    """Cholesky factor with the jitter policy.

    Symmetrise, then add ``1e-10 * trace / d`` times the identity, escalating
    by a factor 10 at most three times.
    """
    S = 0.5 * (S + S.T)
    d = S.shape[0]
    scale = max(np.trace(S) / d, np.finfo(float).tiny)
    jit = 0.0
    for attempt in range(5):
        try:
            return cho_factor(S + jit * np.eye(d), lower=True), jit
        except np.linalg.LinAlgError:
            jit = 1e-10 * scale * 10.0 ** attempt
            if attempt == 4:
                break
    where = "" if step is None else f" at step {step}"
    raise np.linalg.LinAlgError(f"{what} is singular{where} after jitter escalation")


def build_grid(t_meas: np.ndarray, t0: Optional[float] = None, extra=None, substeps: int = 1):
    """Union time grid with measurement indices.

    Returns the grid and, per grid point, the measurement row or ``-1``.
    """
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    pts = [np.asarray(t_meas, float)]
    if t0 is not None:
        if t_meas.size and t0 > t_meas[0]:
            raise ValueError("initial time must not exceed the first measurement time")
        pts.append(np.array([t0], float))
    if extra is not None:
        pts.append(np.asarray(extra, float).ravel())
    base = np.unique(np.concatenate(pts))
    if substeps > 1 and base.size > 1:
        fr = np.linspace(0.0, 1.0, substeps + 1)[:-1]
        grid = (base[:-1, None] + np.diff(base)[:, None] * fr[None, :]).ravel()
        grid = np.append(grid, base[-1])
    else:
        grid = base
    idx = np.full(grid.size, -1, dtype=int)
    pos = np.searchsorted(grid, t_meas)
    idx[pos] = np.arange(t_meas.size)
    return grid, idx


def _empty_track(grid, idx, d):
    N = grid.size
    return PosteriorTrack(grid, idx, np.zeros((N, d)), np.zeros((N, d, d)), np.zeros((N, d)),
                          np.zeros((N, d, d)), np.zeros((N, d, d)), [None] * N, np.zeros(N))


def _linear_update(m, P, y, H, R, step):
    v = y - H @ m
    S = H @ P @ H.T + R
    cf, _ = chol_jitter(S, "innovation covariance", step)
    K = cho_solve(cf, H @ P).T
    m = m + K @ v
    P = P - K @ S @ K.T
    logdet = 2 * np.sum(np.log(np.diag(cf[0])))
    ll = -0.5 * (v.size * np.log(2 * np.pi) + logdet + v @ cho_solve(cf, v))
    return m, 0.5 * (P + P.T), K, ll


def _valid(y):
    return y is not None and np.all(np.isfinite(y))


# -- Kalman filter ----------------------------------------------------------------

def _linear_predict(model: LinearSdeModel, t_from, t_to, cache):
    dt = t_to - t_from
    if not model.time_varying:
        key = round(dt, 14)
        if key not in cache:
            B = model.B_at(0.0)
            cache[key] = exact_linear(model.A_at(0.0), B @ B.T, dt)
        return cache[key]
    if model.discretisation == "frozen":
        B = model.B_at(t_from)
        return exact_linear(model.A_at(t_from), B @ B.T, dt)
    # RK4 on dPhi/dt = A Phi and dQ/dt = A Q + Q A^T + B B^T
    d = model.dim_state
    n = model.rk4_substeps
    h = dt / n
    Phi, Q = np.eye(d), np.zeros((d, d))

    def rhs(t, Phi, Q):
        A, B = model.A_at(t), model.B_at(t)
        return A @ Phi, A @ Q + Q @ A.T + B @ B.T

    for i in range(n):
        t = t_from + i * h
        k1 = rhs(t, Phi, Q)
        k2 = rhs(t + h / 2, Phi + h / 2 * k1[0], Q + h / 2 * k1[1])
        k3 = rhs(t + h / 2, Phi + h / 2 * k2[0], Q + h / 2 * k2[1])
        k4 = rhs(t + h, Phi + h * k3[0], Q + h * k3[1])
        Phi = Phi + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        Q = Q + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return Phi, 0.5 * (Q + Q.T)


def kalman_filter(model: LinearSdeModel, meas: MeasurementModel, data: TimeSeries,
                  t0: Optional[float] = None, pred_times=None, substeps: int = 1) -> PosteriorTrack:
    """Continuous-discrete Kalman filter.

    Parameters
    ----------
    model : LinearSdeModel
        Prior dynamics; ``m0, P0`` hold at ``t0`` (default: first data time).
    meas : MeasurementModel
        Must be linear.
    data : TimeSeries
        Rows with non-finite ``y`` are skipped.
    t0 : float, optional
    pred_times : array_like, optional
        Extra grid times without measurements (interpolation / forecasting).
    substeps : int
        Split every gap into this many prediction steps.
    """
    if not meas.linear:
        raise ValueError("kalman_filter needs a linear measurement model")
    t0 = data.t[0] if (t0 is None and len(data)) else t0
    grid, idx = build_grid(data.t, t0, pred_times, substeps)
    d = model.dim_state
    tr = _empty_track(grid, idx, d)
    m, P = model.m0.copy(), model.P0.copy()
    cache = {}
    for k in range(grid.size):
        if k > 0:
            F, Q = _linear_predict(model, grid[k - 1], grid[k], cache)
            tr.D[k] = P @ F.T
            m, P = F @ m, F @ P @ F.T + Q
            P = 0.5 * (P + P.T)
        tr.m_pred[k], tr.P_pred[k] = m, P
        j = idx[k]
        if j >= 0 and _valid(data.y[j]):
            m, P, K, ll = _linear_update(m, P, data.y[j], meas.H_at(j), meas.R_at(j, m, P, data), j)
            tr.gain[k], tr.loglik_inc[k] = K, ll
        tr.m_filt[k], tr.P_filt[k] = m, P
    return tr


def _smooth(track: PosteriorTrack) -> PosteriorTrack:
    N = track.t.size
    ms = track.m_filt.copy()
    Ps = track.P_filt.copy()
    for k in range(N - 2, -1, -1):
        cf, _ = chol_jitter(track.P_pred[k + 1], "predictive covariance", k + 1)
        G = cho_solve(cf, track.D[k + 1].T).T
        ms[k] = track.m_filt[k] + G @ (ms[k + 1] - track.m_pred[k + 1])
        Pk = track.P_filt[k] + G @ (Ps[k + 1] - track.P_pred[k + 1]) @ G.T
        Ps[k] = 0.5 * (Pk + Pk.T)
    track.m_smooth, track.P_smooth = ms, Ps
    return track


def rts_smoother(track: PosteriorTrack, model=None, data=None) -> PosteriorTrack:
    """Rauch--Tung--Striebel backward pass (in place; returns the track).

    Gains are ``G_k = D_{k+1} (P^-_{k+1})^{-1}`` using the cross-covariances
    stored by the forward pass.
    """
    return _smooth(track)


# -- sigma-point filter -------------------------------------------------------------

def _as_rule(rule, d) -> QuadratureRule:
    if isinstance(rule, QuadratureRule):
        if rule.dim != d:
            raise ValueError("quadrature rule dimension does not match the state")
        return rule
    return make_rule(rule, d)


def _sigma(m, P, rule):
    L = psd_sqrt(P)
    return m[:, None] + L @ rule.nodes.T


def _predict_sigma(pair, m, P, dt, rule):
    X = _sigma(m, P, rule)
    f, Q = pair.moments(X, dt)
    mp = f @ rule.wm
    df = f - mp[:, None]
    Pp = (df * rule.wc) @ df.T + Q @ rule.wc
    D = ((X - m[:, None]) * rule.wc) @ df.T
    return mp, 0.5 * (Pp + Pp.T), D


def _predict_taylor(pair, m, P, dt):
    f, Q = pair.moments(m[:, None], dt)
    J = pair.jacobian(m, dt)
    Pp = J @ P @ J.T + Q[:, :, 0]
    return f[:, 0], 0.5 * (Pp + Pp.T), P @ J.T


def gaussian_filter(pair: TransitionPair, meas: MeasurementModel, data: TimeSeries, rule="gh3",
                    substeps: int = 1, m0=None, P0=None, t0: Optional[float] = None,
                    pred_times=None) -> PosteriorTrack:
    """Continuous-discrete Gaussian (assumed-density) filter.

    Prediction integrates ``f`` and ``f f^T + Q`` against the current Gaussian
    with a sigma-point ``rule`` (or linearises ``f`` when ``rule="taylor"``
    and the pair provides a Jacobian).  The cross-covariance needed by the
    smoother is computed from the same sigma points.

    Parameters
    ----------
    pair : TransitionPair
    meas : MeasurementModel
    data : TimeSeries
    rule : QuadratureRule or str
    substeps : int
        Prediction steps per gap.
    m0, P0 : array_like
        Initial moments at ``t0`` (default: first data time).
    pred_times : array_like, optional
        Extra prediction-only grid times.
    """
    d = pair.dim
    taylor = isinstance(rule, str) and rule.lower() in ("taylor", "ekf")
    if taylor and pair.jacobian is None:
        raise ValueError("this transition pair has no Jacobian for Taylor linearisation")
    r = None if taylor else _as_rule(rule, d)
    t0 = data.t[0] if (t0 is None and len(data)) else t0
    grid, idx = build_grid(data.t, t0, pred_times, substeps)
    tr = _empty_track(grid, idx, d)
    m = np.zeros(d) if m0 is None else np.asarray(m0, float).copy()
    P = np.eye(d) if P0 is None else np.atleast_2d(np.asarray(P0, float)).copy()
    for k in range(grid.size):
        if k > 0:
            dt = grid[k] - grid[k - 1]
            try:
                if taylor:
                    m, P, D = _predict_taylor(pair, m, P, dt)
                else:
                    m, P, D = _predict_sigma(pair, m, P, dt, r)
            except np.linalg.LinAlgError as err:
                raise np.linalg.LinAlgError(f"prediction failed at step {k}: {err}") from None
            tr.D[k] = D
            if np.linalg.eigvalsh(P)[0] < -1e-9 * max(1.0, np.trace(P)):
                tr.events.append((k, "indefinite predictive covariance"))
        tr.m_pred[k], tr.P_pred[k] = m, P
        j = idx[k]
        if j >= 0 and _valid(data.y[j]):
            R = meas.R_at(j, m, P, data)
            if meas.linear:
                m, P, K, ll = _linear_update(m, P, data.y[j], meas.H_at(j), R, j)
            else:
                m, P, K, ll = _sigma_update(m, P, data.y[j], meas, R, j, r)
            tr.gain[k], tr.loglik_inc[k] = K, ll
        tr.m_filt[k], tr.P_filt[k] = m, P
    return tr


def _sigma_update(m, P, y, meas, R, step, rule):
    if rule is None:
        rule = make_rule("unscented", m.size)
    X = _sigma(m, P, rule)
    Z = meas.h_at(X, step)
    mu = Z @ rule.wm
    dz = Z - mu[:, None]
    S = (dz * rule.wc) @ dz.T + R
    C = ((X - m[:, None]) * rule.wc) @ dz.T
    cf, _ = chol_jitter(S, "innovation covariance", step)
    K = cho_solve(cf, C.T).T
    v = y - mu
    m = m + K @ v
    P = P - K @ S @ K.T
    logdet = 2 * np.sum(np.log(np.diag(cf[0])))
    ll = -0.5 * (v.size * np.log(2 * np.pi) + logdet + v @ cho_solve(cf, v))
    return m, 0.5 * (P + P.T), K, ll


def gaussian_smoother(track: PosteriorTrack, pair=None, rule=None, data=None) -> PosteriorTrack:
    """Backward pass of the Gaussian smoother.

    The cross-covariances ``D_{k+1}`` were integrated with the filter's
    sigma points, so only the track is needed.
    """
    return _smooth(track)
