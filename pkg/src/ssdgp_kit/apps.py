"""Application pipelines: drift-function estimation and spectro-temporal tracking."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_discrete_are

from .discretise import TransitionPair, exact_linear
from .filtering import (MeasurementModel, PosteriorTrack, TimeSeries, gaussian_filter, gaussian_smoother,
                        kalman_filter, rts_smoother)
from .sde import LinearSdeModel
from .ssgp import MaternParams, matern_ssm

__all__ = [
    "DriftDataset",
    "DriftEstimate",
    "drift_dataset",
    "drift_estimate_em",
    "drift_estimate_ito15",
    "ito15_mean",
    "FourierSsm",
    "SpectroResult",
    "build_fourier_ssm",
    "spectro_estimate",
    "solve_dare",
    "dare_residual",
]

log = logging.getLogger(__name__)


# -- drift estimation ---------------------------------------------------------------------

@dataclass
class DriftDataset:
    """Increments of scalar paths ordered along the state axis.

    ``x`` holds the start states ``x_{k-1}`` (strictly increasing), ``y`` the
    increments ``x_k - x_{k-1}`` and ``dt`` the matching time steps.
    """

    x: np.ndarray
    y: np.ndarray
    dt: np.ndarray
    b: float

    def __post_init__(self):
        if self.x.size < 2:
            raise ValueError("drift estimation needs at least 2 samples")
        if np.any(np.diff(self.x) <= 0):
            raise ValueError("state axis must be strictly increasing")
        if self.b <= 0:
            raise ValueError("dispersion b must be positive")

    def __len__(self):
        return self.x.size

    @property
    def noise(self) -> np.ndarray:
        """Euler-Maruyama measurement noise variances ``b^2 dt_k``."""
        return self.b**2 * self.dt

    def series(self) -> TimeSeries:
        return TimeSeries(self.x, self.y)


def drift_dataset(paths, b: float, dt=None, times=None) -> DriftDataset:
    """Build a :class:`DriftDataset` from one or several scalar paths.

    Parameters
    ----------
    paths : array_like or sequence of array_like
        Sampled scalar paths.
    b : float
        Known constant dispersion.
    dt : float, optional
        Uniform sampling step (alternative to ``times``).
    times : array_like or sequence, optional
        Sampling times per path.

    Identical start states are separated by ``1e-9`` times the data range.
    """
    if isinstance(paths, np.ndarray) and paths.ndim == 1:
        paths = [paths]
        times = None if times is None else [times]
    xs, ys, dts = [], [], []
    for i, p in enumerate(paths):
        p = np.asarray(p, dtype=float).ravel()
        if times is not None:
            step = np.diff(np.asarray(times[i], dtype=float))
        elif dt is not None:
            step = np.full(p.size - 1, float(dt))
        else:
            raise ValueError("give either dt or times")
        xs.append(p[:-1])
        ys.append(np.diff(p))
        dts.append(step)
    x, y, d = np.concatenate(xs), np.concatenate(ys), np.concatenate(dts)
    if x.size < 2:
        raise ValueError("drift estimation needs at least 2 samples")
    order = np.argsort(x, kind="stable")
    x, y, d = x[order], y[order], d[order]
    span = max(float(np.ptp(x)), 1.0)
    gap = 1e-9 * span
    for k in range(1, x.size):
        if x[k] <= x[k - 1]:
            x[k] = x[k - 1] + gap
    return DriftDataset(x, y, d, float(b))


@dataclass
class DriftEstimate:
    """Posterior of the drift on an evaluation grid."""

    x: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    track: PosteriorTrack

    def to_csv(self, path) -> None:
        np.savetxt(path, np.column_stack([self.x, self.mean, self.var]), delimiter=",",
                   header="x,mean,var", comments="", fmt="%.12g")


def _on_grid(track: PosteriorTrack, grid) -> DriftEstimate:
    grid = np.asarray(grid, dtype=float)
    pos = np.searchsorted(track.t, grid)
    hit = np.clip(pos, 0, track.t.size - 1)
    # grid points coincide with track times (added as prediction points)
    for g, h in zip(grid, hit):
        if abs(track.t[h] - g) > 1e-12 * max(1.0, abs(g)):
            raise RuntimeError("evaluation grid point missing from the posterior track")
    return DriftEstimate(grid, track.m_smooth[hit, 0].copy(), track.P_smooth[hit, 0, 0].copy(), track)


def _eval_grid(data: DriftDataset, grid):
    if grid is None:
        return None
    grid = np.asarray(grid, dtype=float)
    # drop grid points that collide with data (they are read from the data rows)
    return grid[~np.isin(grid, data.x)]


def drift_estimate_em(data: DriftDataset, prior: MaternParams, grid=None) -> DriftEstimate:
    """Drift posterior from the Euler-Maruyama measurement model.

    ``y_k = a(x_{k-1}) dt_k + noise`` with noise variance ``b^2 dt_k``; the
    drift carries a Matérn state-space prior along the sorted state axis.
    """
    ss = matern_ssm(prior)
    g = ss.dim

    def H(k):
        h = np.zeros((1, g))
        h[0, 0] = data.dt[k]
        return h

    meas = MeasurementModel(H=H, noise=data.noise[:, None, None], dim_y=1)
    tr = kalman_filter(ss.linear_model(), meas, data.series(), pred_times=_eval_grid(data, grid))
    tr = rts_smoother(tr)
    grid = tr.t[tr.meas_index >= 0] if grid is None else grid
    return _on_grid(tr, grid)


def ito15_mean(state, dt, b):
    """Increment mean ``a dt + (a a' + a'' b^2 / 2) dt^2 / 2`` from ``(a, a', a'')``."""
    a, da, dda = state[0], state[1], state[2]
    return a * dt + 0.5 * (a * da + 0.5 * dda * b**2) * dt**2


def _lti_pair(A, LL) -> TransitionPair:
    cache = {}

    def moments(x, dt):
        key = round(float(dt), 15)
        if key not in cache:
            cache[key] = exact_linear(A, LL, dt)
        F, Q = cache[key]
        f = np.tensordot(F, x, axes=(1, 0))
        Qb = np.broadcast_to(Q.reshape(Q.shape + (1,) * (x.ndim - 1)), Q.shape + x.shape[1:])
        return f, np.array(Qb)

    return TransitionPair(moments, A.shape[0], "exact_linear", lambda x, dt: exact_linear(A, LL, dt)[0])


def drift_estimate_ito15(data: DriftDataset, prior: MaternParams, grid=None, rule="unscented") -> DriftEstimate:
    """Drift posterior from the order-1.5 Itô-Taylor measurement model.

    The state carries ``(a, a', a'')`` so the prior must have ``nu = 5/2``.
    The increment noise variance ``b^2 (dt + a' dt^2 + a'^2 dt^3 / 3)`` is
    evaluated with the predictive moments of ``a'`` at every step.
    """
    if abs(prior.nu - 2.5) > 1e-12:
        raise ValueError("the Itô-1.5 drift model needs a nu = 5/2 prior (state a, a', a'')")
    ss = matern_ssm(prior)
    b = data.b

    def h(x, k):
        return ito15_mean(x, data.dt[k], b)[None, :]

    def noise(k, m, P):
        dt = data.dt[k]
        e1, e2 = m[1], m[1] ** 2 + P[1, 1]
        return np.array([[b**2 * (dt + e1 * dt**2 + e2 * dt**3 / 3.0)]])

    meas = MeasurementModel(h=h, noise=noise, dim_y=1)
    pair = _lti_pair(ss.A, np.outer(ss.B, ss.B))
    tr = gaussian_filter(pair, meas, data.series(), rule, 1, np.zeros(ss.dim), ss.P0,
                         pred_times=_eval_grid(data, grid))
    tr = gaussian_smoother(tr)
    grid = tr.t[tr.meas_index >= 0] if grid is None else grid
    return _on_grid(tr, grid)


# -- spectro-temporal estimation --------------------------------------------------------------

_SPECTRO_PRIORS = {"ou": 0.5, "matern32": 1.5}


@dataclass
class FourierSsm:
    """State-space model of time-varying Fourier coefficients.

    The state stacks ``alpha_0`` followed by ``(alpha_n, beta_n)`` for each
    frequency; each coefficient is an independent stationary process with a
    ``gamma``-dimensional state whose first component is the coefficient.
    """

    freqs: np.ndarray
    prior: str
    gamma: int
    A: np.ndarray
    LL: np.ndarray
    P0: np.ndarray

    @property
    def n_freq(self) -> int:
        return self.freqs.size

    @property
    def dim(self) -> int:
        return (2 * self.n_freq + 1) * self.gamma

    def value_index(self, j: int) -> int:
        """State index of the value of coefficient ``j`` (0 = alpha_0)."""
        return j * self.gamma

    def H(self, t: float) -> np.ndarray:
        row = np.zeros((1, self.dim))
        w = 2 * np.pi * self.freqs * t
        row[0, 0] = 1.0
        row[0, self.value_index(1 + 2 * np.arange(self.n_freq))] = np.cos(w)
        row[0, self.value_index(2 + 2 * np.arange(self.n_freq))] = np.sin(w)
        return row

    def linear_model(self) -> LinearSdeModel:
        return LinearSdeModel(self.A, _factor(self.LL), np.zeros(self.dim), self.P0)

    def rotated(self):
        """Time-invariant model of the phase-rotated coefficients.

        Each pair ``(alpha_n, beta_n)`` is rotated by ``2 pi f_n t`` so the
        measurement row becomes constant.
        """
        g = self.gamma
        A = self.A.copy()
        H = np.zeros((1, self.dim))
        H[0, 0] = 1.0
        J = np.array([[0.0, 1.0], [-1.0, 0.0]])
        for n, f in enumerate(self.freqs):
            o = (1 + 2 * n) * g
            A[o:o + 2 * g, o:o + 2 * g] += 2 * np.pi * f * np.kron(J, np.eye(g))
            H[0, o] = 1.0
        return A, H

    def unrotate(self, t, z):
        """Map rotated states ``z`` (T, dim) at times ``t`` back to coefficients."""
        g = self.gamma
        x = np.array(z, dtype=float, copy=True)
        for n, f in enumerate(self.freqs):
            o = (1 + 2 * n) * g
            w = 2 * np.pi * f * np.asarray(t)
            c, s = np.cos(w)[:, None], np.sin(w)[:, None]
            za, zb = z[:, o:o + g], z[:, o + g:o + 2 * g]
            x[:, o:o + g] = c * za - s * zb
            x[:, o + g:o + 2 * g] = s * za + c * zb
        return x


def _factor(LL):
    w, V = np.linalg.eigh(0.5 * (LL + LL.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def _resonator(ell: float, sigma: float, freq: float):
    """Damped rotation with covariance ``sigma^2 exp(-|tau| / ell) cos(2 pi freq tau)``."""
    w = 2 * np.pi * freq
    A = np.array([[-1.0 / ell, -w], [w, -1.0 / ell]])
    return A, (2 * sigma**2 / ell) * np.eye(2), sigma**2 * np.eye(2)


def build_fourier_ssm(freqs: Sequence[float], prior: str = "ou", ell: float = 1.0, sigma: float = 1.0,
                      resonator_freq: Optional[float] = None) -> FourierSsm:
    """Block-diagonal prior over ``2N + 1`` Fourier coefficients.

    Parameters
    ----------
    freqs : sequence of float
        Positive, distinct analysis frequencies.
    prior : {"ou", "matern32", "resonator"}
        Per-coefficient process.  ``"resonator"`` is quasi-periodic with
        covariance ``sigma^2 exp(-|tau| / ell) cos(2 pi resonator_freq tau)``.
    ell, sigma : float
        Length scale (damping time for the resonator) and magnitude.
    resonator_freq : float, optional
        Oscillation frequency of the resonator prior; required for it and
        rejected for the other priors.
    """
    freqs = np.asarray(freqs, dtype=float).ravel()
    if freqs.size < 1:
        raise ValueError("need at least one frequency")
    if np.any(freqs <= 0):
        raise ValueError("frequencies must be positive")
    if np.unique(freqs).size != freqs.size:
        raise ValueError("duplicate frequencies")
    if prior == "resonator":
        if resonator_freq is None or resonator_freq < 0:
            raise ValueError("the resonator prior needs resonator_freq >= 0")
        if ell <= 0 or sigma <= 0:
            raise ValueError("ell and sigma must be positive")
        A, LL, P0 = _resonator(ell, sigma, float(resonator_freq))
    elif prior in _SPECTRO_PRIORS:
        if resonator_freq is not None:
            raise ValueError(f"resonator_freq only applies to the resonator prior, not {prior!r}")
        ss = matern_ssm(MaternParams(_SPECTRO_PRIORS[prior], ell, sigma))
        A, LL, P0 = ss.A, np.outer(ss.B, ss.B), ss.P0
    else:
        raise ValueError(f"prior must be one of {sorted(_SPECTRO_PRIORS) + ['resonator']}")
    I = np.eye(2 * freqs.size + 1)
    return FourierSsm(freqs, prior, A.shape[0], np.kron(I, A), np.kron(I, LL), np.kron(I, P0))


def solve_dare(F, H, Q, R, tol: float = 1e-12, max_iter: int = 10000) -> np.ndarray:
    """Steady predictive covariance, the fixed point of the Riccati map.

    ``P = F (P - P H^T (H P H^T + R)^-1 H P) F^T + Q``.  Uses the Schur
    solver and falls back to iterating the map (until the relative change
    drops below ``tol``) when that solver rejects the pencil.
    """
    F, H, Q, R = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (F, H, Q, R))
    try:
        P = solve_discrete_are(F.T, H.T, Q, R)
        if np.all(np.isfinite(P)):
            return 0.5 * (P + P.T)
    except (np.linalg.LinAlgError, ValueError) as err:
        log.info("Schur DARE solver failed (%s); iterating the Riccati map", err)
    P = Q.copy()
    for it in range(1, max_iter + 1):
        Pn = _riccati(F, H, Q, R, P)
        change = np.max(np.abs(Pn - P)) / max(np.max(np.abs(Pn)), 1e-300)
        P = Pn
        if change < tol or not np.any(Pn):
            return P
        if not np.all(np.isfinite(P)):
            break
    raise RuntimeError(f"Riccati iteration did not converge in {max_iter} iterations")


def _riccati(F, H, Q, R, P):
    S = H @ P @ H.T + R
    K = np.linalg.solve(S, H @ P).T
    Pn = F @ (P - K @ S @ K.T) @ F.T + Q
    return 0.5 * (Pn + Pn.T)


def dare_residual(P, F, H, Q, R) -> float:
    F, H, Q, R = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (F, H, Q, R))
    return float(np.max(np.abs(P - _riccati(F, H, Q, R, P))))


@dataclass
class SpectroResult:
    """Coefficient tracks and spectrogram magnitudes.

    ``alpha`` is ``(T, N)``, ``beta`` is ``(T, N)``, ``alpha0`` is ``(T,)``;
    ``magnitude = sqrt(alpha^2 + beta^2)``.
    """

    t: np.ndarray
    freqs: np.ndarray
    alpha0: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    filtered: np.ndarray
    smoothed: np.ndarray
    gain: Optional[np.ndarray] = None
    P_steady: Optional[np.ndarray] = None

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.alpha, self.beta)

    def to_csv(self, path) -> None:
        T, N = self.alpha.shape
        rows = np.column_stack([np.repeat(self.t, N), np.tile(self.freqs, T), self.alpha.ravel(),
                                self.beta.ravel(), self.magnitude.ravel()])
        np.savetxt(path, rows, delimiter=",", header="t,f,alpha_mean,beta_mean,magnitude",
                   comments="", fmt="%.12g")


def _result(ssm, t, xf, xs, **kw) -> SpectroResult:
    g = ssm.gamma
    n = np.arange(ssm.n_freq)
    return SpectroResult(t, ssm.freqs, xs[:, 0], xs[:, (1 + 2 * n) * g], xs[:, (2 + 2 * n) * g], xf, xs, **kw)


def spectro_estimate(ssm: FourierSsm, data: TimeSeries, Xi: float, mode: str = "kf_rts") -> SpectroResult:
    """Track Fourier coefficients.

    ``kf_rts`` runs the exact Kalman filter and RTS smoother.
    ``steady_state`` uses the phase-rotated time-invariant model with the
    Riccati fixed point in place of the transient covariances; it needs a
    uniform sampling step.
    """
    t = np.asarray(data.t, dtype=float)
    if mode == "kf_rts":
        meas = MeasurementModel(H=lambda k: ssm.H(t[k]), noise=Xi, dim_y=1)
        tr = rts_smoother(kalman_filter(ssm.linear_model(), meas, data))
        keep = tr.meas_index >= 0
        gains = np.array([np.ravel(tr.gain[i]) for i in np.nonzero(keep)[0]])
        return _result(ssm, t, tr.m_filt[keep], tr.m_smooth[keep], gain=gains)
    if mode != "steady_state":
        raise ValueError("mode must be 'kf_rts' or 'steady_state'")
    dts = np.diff(t)
    if dts.size and np.ptp(dts) > 1e-9 * np.mean(dts):
        raise ValueError("steady_state mode needs uniformly sampled data")
    A, H = ssm.rotated()
    F, Q = exact_linear(A, ssm.LL, float(dts[0]) if dts.size else 1.0)
    R = np.array([[float(Xi)]])
    P = solve_dare(F, H, Q, R)
    S = float((H @ P @ H.T + R)[0, 0])
    K = (P @ H.T / S).ravel()
    Pf = P - np.outer(K, K) * S
    G = np.linalg.solve(P.T, (Pf @ F.T).T).T
    y = np.asarray(data.y, dtype=float).reshape(len(t), -1)[:, 0]
    T, d = t.size, ssm.dim
    zf = np.zeros((T, d))
    m = np.zeros(d)
    for k in range(T):
        if k > 0:
            m = F @ m
        m = m + K * (y[k] - H[0] @ m)
        zf[k] = m
    zs = zf.copy()
    for k in range(T - 2, -1, -1):
        zs[k] = zf[k] + G @ (zs[k + 1] - F @ zf[k])
    return _result(ssm, t, ssm.unrotate(t, zf), ssm.unrotate(t, zs), gain=K, P_steady=P)
