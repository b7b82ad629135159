"""Matérn state-space Gaussian processes."""
from __future__ import annotations

from dataclasses import dataclass
from math import comb, factorial, gamma as gamma_fn, sqrt
from typing import Callable, Optional, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammaln, kv

from . import jet as dm
from .filtering import MeasurementModel, PosteriorTrack, TimeSeries, kalman_filter, rts_smoother
from .sde import LinearSdeModel

__all__ = [
    "SUPPORTED_NU",
    "MaternParams",
    "SsgpModel",
    "matern_ssm",
    "matern_coefficients",
    "solve_lyapunov",
    "matern_cov",
    "matern_gram",
    "ns_matern_cov",
    "ns_matern_gram",
    "scaled_bessel",
    "batch_gp_posterior",
    "ssgp_regress",
]

SUPPORTED_NU = (0.5, 1.5, 2.5, 3.5)


def _check_nu(nu: float) -> float:
    nu = float(nu)
    if not any(abs(nu - s) < 1e-12 for s in SUPPORTED_NU):
        raise ValueError(f"unsupported smoothness nu={nu}; choose one of {SUPPORTED_NU}")
    return nu


@dataclass(frozen=True)
class MaternParams:
    """Matérn hyperparameters.

    Attributes
    ----------
    nu : float
        Smoothness, one of 1/2, 3/2, 5/2, 7/2.
    ell : float
        Length scale.
    sigma : float
        Magnitude (standard deviation).
    """

    nu: float
    ell: float
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "nu", _check_nu(self.nu))
        if not (self.ell > 0 and self.sigma > 0):
            raise ValueError("ell and sigma must be strictly positive")

    @property
    def order(self) -> int:
        """State dimension ``nu + 1/2``."""
        return int(round(self.nu + 0.5))

    @property
    def kappa(self) -> float:
        return sqrt(2 * self.nu) / self.ell


@dataclass(frozen=True)
class SsgpModel:
    """Companion-form SDE of a Matérn GP with its stationary covariance."""

    params: MaternParams
    A: np.ndarray
    B: np.ndarray
    P0: np.ndarray
    H: np.ndarray

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def linear_model(self, m0=None) -> LinearSdeModel:
        m0 = np.zeros(self.dim) if m0 is None else m0
        return LinearSdeModel(self.A, self.B[:, None], m0, self.P0)


def matern_coefficients(nu: float, ell, sigma):
    """Last row of the companion matrix and the noise loading.

    Works elementwise on arrays and on jets: returns ``(row, b)`` where
    ``row[r] = -C(g, r) kappa^(g - r)`` for ``r = 0..g-1`` and
    ``b = sigma Gamma(g) (2 kappa)^(g - 1/2) / sqrt(Gamma(2g - 1))``.
    """
    g = int(round(nu + 0.5))
    kappa = sqrt(2 * nu) / ell
    row = [-comb(g, r) * kappa ** (g - r) for r in range(g)]
    const = gamma_fn(g) * 2 ** (g - 0.5) / sqrt(gamma_fn(2 * g - 1))
    b = sigma * const * dm.power(kappa, g - 0.5)
    return row, b


def solve_lyapunov(A, LL) -> np.ndarray:
    """Solve ``A P + P A^T + LL = 0`` through the Kronecker-vectorised system.

    For the small companion matrices used here this is markedly more
    accurate than a Schur-based solver.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    LL = np.atleast_2d(np.asarray(LL, dtype=float))
    d = A.shape[0]
    if np.any(np.linalg.eigvals(A).real >= 0):
        raise np.linalg.LinAlgError("Lyapunov system is singular: A is not Hurwitz")
    K = np.kron(np.eye(d), A) + np.kron(A, np.eye(d))
    P = np.linalg.solve(K, -LL.reshape(-1, order="F")).reshape(d, d, order="F")
    return 0.5 * (P + P.T)


def matern_ssm(p: MaternParams) -> SsgpModel:
    """State-space form of a Matérn GP (state: value and its derivatives)."""
    g = p.order
    row, b = matern_coefficients(p.nu, p.ell, p.sigma)
    A = np.zeros((g, g))
    A[:-1, 1:] = np.eye(g - 1)
    A[-1] = row
    B = np.zeros(g)
    B[-1] = b
    P0 = solve_lyapunov(A, np.outer(B, B))
    H = np.zeros((1, g))
    H[0, 0] = 1.0
    return SsgpModel(p, A, B, P0, H)


def _half_integer_poly(nu: float):
    """Coefficients ``c_j`` with ``z^nu K_nu(z) = sqrt(pi/2) e^{-z} sum_j c_j z^j``."""
    n = int(round(nu - 0.5))
    c = np.zeros(n + 1)
    for k in range(n + 1):
        c[n - k] = factorial(n + k) / (factorial(k) * factorial(n - k)) / 2.0**k
    return c


def scaled_bessel(z, nu: float):
    """``z^nu K_nu(z) / (Gamma(nu) 2^(nu - 1))``, equal to 1 at ``z = 0``.

    Half-integer ``nu`` uses the exponential-polynomial identity (and accepts
    jets); other values go through :func:`scipy.special.kv`.
    """
    nu = float(nu)
    norm = gamma_fn(nu) * 2 ** (nu - 1)
    if abs(nu - round(nu - 0.5) - 0.5) < 1e-12:
        c = _half_integer_poly(nu)
        poly = c[-1]
        for cj in c[-2::-1]:
            poly = poly * z + cj
        return sqrt(np.pi / 2) / norm * poly * dm.exp(-z)
    z = np.asarray(z, dtype=float)
    with np.errstate(invalid="ignore"):
        out = np.where(z > 0, np.power(z, nu) * kv(nu, np.where(z > 0, z, 1.0)) / norm, 1.0)
    return out


def matern_cov(tau, p: MaternParams):
    """Stationary Matérn covariance at lag ``tau``."""
    tau = np.abs(np.asarray(tau, dtype=float))
    return p.sigma**2 * scaled_bessel(sqrt(2 * p.nu) * tau / p.ell, p.nu)


def matern_gram(t, p: MaternParams, t2=None) -> np.ndarray:
    t = np.asarray(t, float)
    t2 = t if t2 is None else np.asarray(t2, float)
    return matern_cov(t[:, None] - t2[None, :], p)


def ns_matern_gram(t, ell, sigma, nu: float, t2=None, ell2=None, sigma2=None,
                   parametrisation: str = "length_scale"):
    """Non-stationary Matérn covariance between two sets of inputs.

    ``C = s s' (L L')^(1/4) sqrt(2) / sqrt(L + L') * k_nu(sqrt(8 nu tau^2 / (L + L')))``
    with ``k_nu`` the normalised :func:`scaled_bessel`.

    With ``parametrisation="length_scale"`` (default) the inputs ``ell`` are
    ordinary Matérn length scales and ``L = 2 ell^2``, so constant ``ell``
    reproduces :func:`matern_cov` exactly.  ``"raw"`` uses ``L = ell``.
    ``ell``/``sigma`` may be arrays or jets of matching shape ``(n, m)`` after
    broadcasting.
    """
    t = np.asarray(t, float)
    t2 = t if t2 is None else np.asarray(t2, float)
    ell2 = ell if ell2 is None else ell2
    sigma2 = sigma if sigma2 is None else sigma2
    if parametrisation == "length_scale":
        L1, L2 = 2.0 * ell * ell, 2.0 * ell2 * ell2
    elif parametrisation == "raw":
        L1, L2 = ell, ell2
    else:
        raise ValueError("parametrisation must be 'length_scale' or 'raw'")
    tau = np.abs(t[:, None] - t2[None, :]) if np.ndim(t) == 1 else np.abs(t - t2)
    Ls = L1 + L2
    inv = dm.power(Ls, -0.5)
    z = sqrt(8 * nu) * tau * inv
    pref = sigma * sigma2 * dm.power(L1 * L2, 0.25) * sqrt(2.0) * inv
    return pref * scaled_bessel(z, nu)


def ns_matern_cov(t, tp, ell: Callable, sigma: Callable, nu: float, parametrisation: str = "length_scale"):
    """Non-stationary Matérn covariance with length-scale/magnitude functions."""
    t = np.asarray(t, float)
    tp = np.asarray(tp, float)
    return ns_matern_gram(t, ell(t), sigma(t), nu, tp, ell(tp), sigma(tp), parametrisation)


def batch_gp_posterior(C_gram, Xi_diag, y):
    """Batch GP regression ``m = C (C + Xi)^-1 y``, ``P = C - C (C + Xi)^-1 C``."""
    C = np.asarray(C_gram, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    Xi = np.asarray(Xi_diag, dtype=float)
    Xi = np.diag(np.broadcast_to(Xi, y.shape)) if Xi.ndim <= 1 else Xi
    if C.shape != (y.size, y.size):
        raise ValueError("Gram matrix and data sizes differ")
    try:
        cf = cho_factor(C + Xi, lower=True)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("C + Xi is numerically singular; add jitter to the Gram matrix") from None
    m = C @ cho_solve(cf, y)
    P = C - C @ cho_solve(cf, C)
    return m, 0.5 * (P + P.T)


def ssgp_regress(model: SsgpModel, data: TimeSeries, Xi, pred_times=None) -> PosteriorTrack:
    """GP regression through Kalman filtering and RTS smoothing.

    ``pred_times`` adds prediction-only points to the grid; the smoother then
    interpolates there.
    """
    meas = MeasurementModel(H=model.H, noise=Xi if np.ndim(Xi) != 1 else np.asarray(Xi)[:, None, None])
    tr = kalman_filter(model.linear_model(), meas, data, pred_times=pred_times)
    return rts_smoother(tr)
