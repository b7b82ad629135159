"""Discretisation schemes and path simulation."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import expm as _scipy_expm

from .jet import first_derivatives, lift, value_grad_hess
from .sde import SdeModel, as_states

logger = logging.getLogger(__name__)

__all__ = [
    "TransitionPair",
    "PathSample",
    "repair_covariance",
    "psd_sqrt",
    "euler_maruyama",
    "expm",
    "exact_linear",
    "exact_linear_batch",
    "lcd",
    "ito15_scalar",
    "ito15_noise_cov",
    "simulate",
    "benes_density",
    "benes_sample",
    "UnsupportedSchemeError",
]


class UnsupportedSchemeError(ValueError):
    """The requested scheme does not apply to the given model."""


def repair_covariance(Q: np.ndarray, tag: str = "Q") -> np.ndarray:
    """Symmetrise a batch of covariances ``(d, d, *batch)`` and lift negative spectra.

    Matrices with a negative smallest eigenvalue get ``(|lambda_min| + 1e-9) I``
    added.  Each repair is logged.
    """
    Q = 0.5 * (Q + np.swapaxes(Q, 0, 1))
    d = Q.shape[0]
    Qb = np.moveaxis(Q.reshape(d, d, -1), -1, 0)
    lam = np.linalg.eigvalsh(Qb)[:, 0]
    bad = lam < 0
    if np.any(bad):
        logger.info("%s repaired at %d of %d points (min eigenvalue %.3e)", tag, int(bad.sum()), bad.size, lam.min())
        Qb = Qb.copy()
        Qb[bad] += (np.abs(lam[bad]) + 1e-9)[:, None, None] * np.eye(d)
        Q = np.moveaxis(Qb, 0, -1).reshape(Q.shape)
    return Q


def psd_sqrt(S: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Matrix square roots ``L L^T = S`` for a stack ``(..., d, d)``.

    Tries Cholesky first and falls back to a clipped eigen-decomposition for
    singular positive semi-definite input.
    """
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        pass
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    w, V = np.linalg.eigh(S)
    scale = np.maximum(1.0, np.abs(w).max(axis=-1, keepdims=True))
    if np.any(w < -tol * scale):
        raise np.linalg.LinAlgError(f"matrix is not positive semi-definite (min eigenvalue {w.min():.3e})")
    return V * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


@dataclass(frozen=True)
class TransitionPair:
    """Gaussian one-step approximation ``X_k ~ N(f(X_{k-1}), Q(X_{k-1}))``.

    ``moments(x, dt)`` maps a state batch ``(d, *batch)`` to the pair
    ``(f, Q)`` with shapes ``(d, *batch)`` and ``(d, d, *batch)``.
    ``jacobian(x, dt)``, when present, returns ``df/dx`` at a single state.
    """

    moments: Callable
    dim: int
    scheme: str
    jacobian: Optional[Callable] = None

    def _eval(self, x, dt):
        xs, single = as_states(x, self.dim)
        f, Q = self.moments(xs, float(dt))
        return f, Q, single

    def f(self, x, dt) -> np.ndarray:
        f, _, single = self._eval(x, dt)
        return f[:, 0] if single else f

    def Q(self, x, dt) -> np.ndarray:
        _, Q, single = self._eval(x, dt)
        return Q[:, :, 0] if single else Q


@dataclass
class PathSample:
    """Simulated paths on a common time grid.

    ``states`` has shape ``(n_paths, T, d)``.
    """

    times: np.ndarray
    states: np.ndarray
    seed: int

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("simulated states are not finite")

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    def to_csv(self, path) -> None:
        d = self.states.shape[-1]
        header = ["t"] + [f"x{i + 1}" for i in range(d)] + ["seed"]
        multi = self.n_paths > 1
        if multi:
            header.append("path")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for p in range(self.n_paths):
                for k, t in enumerate(self.times):
                    row = [repr(float(t))] + [repr(float(v)) for v in self.states[p, k]] + [self.seed]
                    if multi:
                        row.append(p)
                    w.writerow(row)


def _broadcast_gamma(model: SdeModel, xs):
    nb = xs.ndim - 1
    G = np.asarray(model.gamma(xs), dtype=float)
    if G.ndim == 2:
        G = G.reshape(G.shape + (1,) * nb)
    return np.broadcast_to(G, (model.dim_state, model.dim_state) + xs.shape[1:])


def euler_maruyama(model: SdeModel) -> TransitionPair:
    """``f = x + a(x) dt``, ``Q = Gamma(x) dt``."""

    def moments(x, dt):
        return x + _vec(model, x) * dt, _broadcast_gamma(model, x) * dt

    def jac(x, dt):
        d = model.dim_state
        _, J = first_derivatives(model.a(lift(np.asarray(x, float).reshape(d, 1), 1)))
        J = np.zeros((d, 1, d)) if J is None else np.broadcast_to(J, (d, 1, d))
        return np.eye(d) + J[:, 0, :] * dt

    return TransitionPair(moments, model.dim_state, "euler_maruyama", jac)


def _vec(model: SdeModel, x):
    a = np.asarray(model.a(x), dtype=float)
    if a.ndim == 1:
        a = a.reshape(a.shape + (1,) * (x.ndim - 1))
    return np.broadcast_to(a, x.shape)


def expm(M: np.ndarray) -> np.ndarray:
    """Matrix exponential (Padé scaling-and-squaring); works on stacks."""
    E = _scipy_expm(M)
    if not np.all(np.isfinite(E)):
        raise FloatingPointError("matrix exponential is not finite")
    return E


def exact_linear(A, LL, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact discretisation of ``dU = A U dt + B dW`` with ``LL = B B^T``.

    Returns
    -------
    F : ndarray
        ``exp(dt A)``.
    Q : ndarray
        Integrated noise covariance from the exponential of the block matrix
        ``[[A, LL], [0, -A^T]] dt``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    LL = np.atleast_2d(np.asarray(LL, dtype=float))
    if dt < 0:
        raise ValueError("dt must be non-negative")
    F, Q = exact_linear_batch(A[None], LL[None], dt)
    return F[0], Q[0]


def exact_linear_batch(A: np.ndarray, LL: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`exact_linear` for stacks ``(n, d, d)``."""
    n, d, _ = A.shape
    if dt == 0.0:
        return np.broadcast_to(np.eye(d), A.shape).copy(), np.zeros_like(A)
    if d == 1:
        a = A[:, 0, 0] * dt
        F = np.exp(a)
        small = np.abs(a) < 1e-8
        # (exp(2a) - 1) / (2a) with a series fallback near zero
        ratio = np.where(small, 1.0 + a, np.expm1(2 * a) / np.where(small, 1.0, 2 * a))
        Q = LL[:, 0, 0] * dt * ratio
        return F[:, None, None], Q[:, None, None]
    M = np.zeros((n, 2 * d, 2 * d))
    M[:, :d, :d] = A
    M[:, :d, d:] = LL
    M[:, d:, d:] = -np.swapaxes(A, 1, 2)
    E = expm(M * dt)
    F = E[:, :d, :d]
    Q = E[:, :d, d:] @ np.swapaxes(F, 1, 2)
    Q = 0.5 * (Q + np.swapaxes(Q, 1, 2))
    return F, Q


def lcd(model) -> TransitionPair:
    """Locally conditional discretisation of an assembled SS-DGP.

    Every element's coefficients are frozen at the parent values of the start
    state and discretised exactly; the joint transition is block diagonal.
    """
    D = model.dim_state

    def moments(x, dt):
        batch = x.shape[1:]
        xf = x.reshape(D, -1)
        n = xf.shape[1]
        f = np.empty_like(xf)
        Q = np.zeros((n, D, D))
        for blk in model.element_coefficients(xf):
            sl = blk.slice
            F, Qi = exact_linear_batch(blk.A, blk.LL, dt)
            f[sl] = np.einsum("nij,jn->in", F, xf[sl])
            Q[:, sl, sl] = Qi
        return f.reshape(x.shape), np.moveaxis(Q, 0, -1).reshape((D, D) + batch)

    return TransitionPair(moments, D, "lcd")


def ito15_noise_cov(dt: float) -> np.ndarray:
    """Covariance of ``(dZ, dW)`` with ``dZ`` the time integral of ``W``."""
    return np.array([[dt**3 / 3.0, dt**2 / 2.0], [dt**2 / 2.0, dt]])


def _drift_derivs(model: SdeModel, x):
    """Drift and its first two derivatives for scalar states ``(1, *batch)``."""
    v, g, h = value_grad_hess(model.a(lift(x, 2)), 0, 1)
    shape = (1,) + x.shape[1:]
    v = np.broadcast_to(np.asarray(v, float).reshape(np.shape(v) or (1,)), shape)
    g = np.broadcast_to(np.asarray(g, float)[0], shape)
    h = np.broadcast_to(np.asarray(h, float)[0, 0], shape)
    return v, g, h


def ito15_scalar(model: SdeModel) -> TransitionPair:
    """Itô--Taylor order-1.5 scheme for scalar SDEs with constant dispersion.

    The step is ``x + a dt + (a' a + a'' b^2 / 2) dt^2 / 2 + b dW + a' b dZ``.
    Its one-step law is Gaussian with variance
    ``b^2 (dt + a' dt^2 + a'^2 dt^3 / 3)``.
    """
    if model.dim_state != 1 or model.dim_wiener != 1:
        raise UnsupportedSchemeError("ito15 supports scalar models only")
    probe = np.linspace(-3.0, 3.0, 7)[None, :]
    g = _broadcast_gamma(model, probe)[0, 0]
    if not np.allclose(g, g[0], rtol=0, atol=1e-14):
        raise UnsupportedSchemeError("ito15 requires a constant dispersion")
    b2 = float(g[0])

    def moments(x, dt):
        a, a1, a2 = _drift_derivs(model, x)
        f = x + a * dt + 0.5 * (a1 * a + 0.5 * a2 * b2) * dt**2
        q = b2 * (dt + a1 * dt**2 + a1**2 * dt**3 / 3.0)
        return f, q[None]

    return TransitionPair(moments, 1, "ito15")


def simulate(model: SdeModel, pair: TransitionPair, x0, grid, seed: int, n_paths: int = 1,
             init_cov=None, block: int = 2048) -> PathSample:
    """Simulate paths by iterating ``f + sqrt(Q) xi`` on a time grid.

    Replicate ``r`` draws from ``numpy.random.default_rng([seed, r])`` so the
    result does not depend on how replicates are blocked.

    Parameters
    ----------
    model : SdeModel
        Only used for its state dimension.
    pair : TransitionPair
    x0 : array_like
        Initial state (mean of the initial law if ``init_cov`` is given).
    grid : array_like
        Strictly increasing times, ``grid[0]`` is the initial time.
    seed : int
    n_paths : int
    init_cov : array_like, optional
        Covariance of a Gaussian initial law.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    d = pair.dim
    x0 = np.asarray(x0, dtype=float).reshape(d)
    T = grid.size
    L0 = None if init_cov is None else psd_sqrt(np.atleast_2d(np.asarray(init_cov, float)))
    out = np.empty((n_paths, T, d))
    dts = np.diff(grid)
    for start in range(0, n_paths, block):
        reps = range(start, min(start + block, n_paths))
        noise = np.empty((len(reps), T, d))
        for j, r in enumerate(reps):
            noise[j] = np.random.default_rng([seed, r]).standard_normal((T, d))
        x = np.repeat(x0[:, None], len(reps), axis=1)
        if L0 is not None:
            x = x + L0 @ noise[:, 0].T
        out[start:start + len(reps), 0] = x.T
        for k, dt in enumerate(dts, start=1):
            f, Q = pair.moments(x, dt)
            try:
                L = psd_sqrt(np.moveaxis(Q, -1, 0))
            except np.linalg.LinAlgError as err:
                raise np.linalg.LinAlgError(f"step {k}: {err}") from None
            x = f + np.einsum("nij,nj->in", L, noise[:, k])
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"step {k}: non-finite state")
            out[start:start + len(reps), k] = x.T
    return PathSample(grid, out, int(seed))


def benes_density(x_t, x_s, dt):
    """Transition density of ``dX = tanh(X) dt + dW``.

    ``p(x_t | x_s) = cosh(x_t) / cosh(x_s) exp(-dt / 2) N(x_t | x_s, dt)``.
    """
    dt = np.asarray(dt, dtype=float)
    if np.any(dt <= 0):
        raise ValueError("dt must be positive")
    x_t = np.asarray(x_t, dtype=float)
    x_s = np.asarray(x_s, dtype=float)
    # log cosh computed stably as |x| + log1p(exp(-2|x|)) - log 2
    lc = lambda z: np.abs(z) + np.log1p(np.exp(-2 * np.abs(z))) - np.log(2.0)
    logp = lc(x_t) - lc(x_s) - dt / 2 - 0.5 * np.log(2 * np.pi * dt) - (x_t - x_s) ** 2 / (2 * dt)
    return np.exp(logp)


def benes_sample(x0, grid, seed: int, n_paths: int = 1) -> PathSample:
    """Exact paths of ``dX = tanh(X) dt + dW`` on ``grid``.

    Each transition is the two-component mixture
    ``N(x + dt, dt)`` / ``N(x - dt, dt)`` with weights ``e^{+-x} / (2 cosh x)``.
    """
    grid = np.asarray(grid, dtype=float)
    rng = np.random.default_rng(seed)
    x = np.full(n_paths, float(np.ravel(x0)[0]))
    out = np.empty((n_paths, grid.size, 1))
    out[:, 0, 0] = x
    for k, dt in enumerate(np.diff(grid), start=1):
        up = rng.random(n_paths) < 0.5 * (1.0 + np.tanh(x))
        x = x + np.where(up, dt, -dt) + np.sqrt(dt) * rng.standard_normal(n_paths)
        out[:, k, 0] = x
    return PathSample(grid, out, int(seed))
