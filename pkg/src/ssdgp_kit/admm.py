"""L1-regularised MAP estimation of three-element SS-DGPs via ADMM.

The latent vector is ``v = (u1, u2, u3)`` with ``u1`` the observed function,
``u2`` driving its length scale and ``u3`` its magnitude through a positive
transform ``g``.  Two objectives are provided: a batch one built on the
non-stationary Matérn covariance, and a state-space one built on the
locally conditional (frozen coefficient) transition of Matérn 1/2 elements.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from .discretise import exact_linear
from .jet import Jet
from .ssdgp import Transform
from .ssgp import MaternParams, _check_nu, matern_gram, matern_ssm, ns_matern_gram

__all__ = [
    "RegProblem",
    "AdmmState",
    "AdmmResult",
    "objective_batch",
    "objective_statespace",
    "objective",
    "soft_threshold",
    "admm_solve",
    "map_estimate",
    "map_uncertainty",
    "transform_derivative",
]

log = logging.getLogger(__name__)
_LOG2PI = np.log(2 * np.pi)


def transform_derivative(tf: Transform, u):
    u = np.asarray(u, dtype=float)
    if tf.kind == "exp":
        return np.exp(u)
    if tf.kind == "softplus":
        return 0.5 * (1 + np.tanh(0.5 * u))
    return 1.0 / (1.0 + u * u)


def _chol(C, what="matrix", jitter=1e-9, tries=8):
    """Cholesky with escalating diagonal jitter."""
    scale = max(float(np.mean(np.diag(C))), 1e-300)
    eps = 0.0
    for _ in range(tries):
        try:
            return cho_factor(C + eps * scale * np.eye(C.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            eps = jitter if eps == 0.0 else eps * 10
    raise np.linalg.LinAlgError(f"{what} is not positive definite even with jitter {eps:g}")


def _logdet(cf):
    return 2.0 * np.sum(np.log(np.diag(cf[0])))


@dataclass
class RegProblem:
    """Regularised DGP regression problem.

    Parameters
    ----------
    t, y : array_like
        Increasing times and observations, ``T >= 1``.
    Xi : float or array_like
        Measurement noise variances.
    lam : sequence of 3 floats
        L1 strengths for ``u1, u2, u3``.
    rho : sequence of 3 floats, optional
        ADMM penalties; default ``2 lam + 0.1``.
    Phi : sequence of 3 arrays or None
        ``T x T`` sparsity matrices (identity when None).
    mode : {"statespace", "batch"}
    nu : float
        Smoothness of ``u1``.  The state-space objective needs ``nu = 1/2``.
    leaf2, leaf3 : MaternParams
        Priors of ``u2`` and ``u3``.  The state-space objective needs
        ``nu = 1/2`` leaves.
    transform : Transform
    """

    t: np.ndarray
    y: np.ndarray
    Xi: np.ndarray = 0.01
    lam: Sequence[float] = (0.0, 0.0, 0.0)
    rho: Optional[Sequence[float]] = None
    Phi: Optional[Sequence] = None
    mode: str = "statespace"
    nu: float = 0.5
    leaf2: MaternParams = field(default_factory=lambda: MaternParams(0.5, 1.0, 1.0))
    leaf3: MaternParams = field(default_factory=lambda: MaternParams(0.5, 1.0, 1.0))
    transform: Transform = field(default_factory=Transform)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).ravel()
        self.y = np.asarray(self.y, dtype=float).ravel()
        T = self.t.size
        if T == 0:
            raise ValueError("regularised regression needs at least one data point")
        if self.y.size != T:
            raise ValueError("t and y lengths differ")
        if T > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("times must be strictly increasing")
        self.Xi = np.broadcast_to(np.asarray(self.Xi, dtype=float), (T,)).copy()
        if np.any(self.Xi <= 0):
            raise ValueError("noise variances must be positive")
        self.lam = np.asarray(self.lam, dtype=float)
        if self.lam.shape != (3,) or np.any(self.lam < 0):
            raise ValueError("lam must hold three non-negative values")
        self.rho = 2 * self.lam + 0.1 if self.rho is None else np.asarray(self.rho, dtype=float)
        if self.rho.shape != (3,) or np.any(self.rho <= 0):
            raise ValueError("rho must hold three strictly positive values")
        if self.Phi is None:
            self.Phi = [np.eye(T)] * 3
        self.Phi = [np.asarray(P, dtype=float) for P in self.Phi]
        if len(self.Phi) != 3 or any(P.shape != (T, T) for P in self.Phi):
            raise ValueError(f"Phi must be three {T}x{T} matrices")
        if self.mode not in ("batch", "statespace"):
            raise ValueError("mode must be 'batch' or 'statespace'")
        self.nu = _check_nu(self.nu)
        if self.mode == "statespace" and (self.nu != 0.5 or self.leaf2.nu != 0.5 or self.leaf3.nu != 0.5):
            raise ValueError("the state-space objective supports nu = 1/2 elements only")

    @property
    def T(self) -> int:
        return self.t.size

    def split(self, v):
        v = np.asarray(v, dtype=float)
        return v[:self.T], v[self.T:2 * self.T], v[2 * self.T:]


# -- objectives ------------------------------------------------------------------------

def _gauss_term(r, q):
    """Negative log density of ``N(r; 0, q)`` and its partials in ``r`` and ``q``."""
    val = 0.5 * (r * r / q + np.log(q) + _LOG2PI)
    return val, r / q, 0.5 / q - 0.5 * r * r / (q * q)


def _ou_chain(u, dt, ell, sig):
    """Negative log density of a sampled OU path (stationary start), with gradient."""
    val, dr, _ = _gauss_term(u[0], sig * sig)
    g = np.zeros_like(u)
    g[0] += dr
    if u.size > 1:
        phi = np.exp(-dt / ell)
        q = sig * sig * (1 - phi * phi)
        r = u[1:] - phi * u[:-1]
        vals, dr, _ = _gauss_term(r, q)
        val += vals.sum()
        g[1:] += dr
        g[:-1] -= phi * dr
    return float(val), g


def objective_statespace(v, problem: RegProblem):
    """Negative log joint density of data and latents under the frozen-coefficient transition.

    Returns ``(value, gradient)``.
    """
    p = problem
    u1, u2, u3 = p.split(v)
    tf = p.transform
    ell, sig = tf.forward(u2), tf.forward(u3)
    dell, dsig = transform_derivative(tf, u2), transform_derivative(tf, u3)
    g1, g2, g3 = np.zeros(p.T), np.zeros(p.T), np.zeros(p.T)

    val, dr, dq = _gauss_term(p.y - u1, p.Xi)
    val = val.sum()
    g1 -= dr
    # leaves
    for u, leaf, gg in ((u2, p.leaf2, g2), (u3, p.leaf3, g3)):
        vl, gl = _ou_chain(u, np.diff(p.t), leaf.ell, leaf.sigma)
        val += vl
        gg += gl
    # observed element: initial law N(0, g(u3_1)^2)
    v0, dr, dq = _gauss_term(u1[0], sig[0] ** 2)
    val += v0
    g1[0] += dr
    g3[0] += dq * 2 * sig[0] * dsig[0]
    if p.T > 1:
        dt = np.diff(p.t)
        l, s = ell[:-1], sig[:-1]
        phi = np.exp(-dt / l)
        q = s * s * (1 - phi * phi)
        r = u1[1:] - phi * u1[:-1]
        vk, dr, dq = _gauss_term(r, q)
        val += vk.sum()
        g1[1:] += dr
        g1[:-1] -= phi * dr
        dphi = phi * dt / (l * l) * dell[:-1]
        g2[:-1] += -dr * u1[:-1] * dphi + dq * (-2 * s * s * phi * dphi)
        g3[:-1] += dq * 2 * s * (1 - phi * phi) * dsig[:-1]
    return float(val), np.concatenate([g1, g2, g3])


def _ns_gram_partials(t, ell, sig, nu):
    """Gram matrix and its partials in the row-side ``ell`` and ``sigma``."""
    T = t.size
    one = np.ones((T, T))

    def seed(vals, direction, row):
        data = np.zeros((T, T, 5))
        data[..., 0] = vals[:, None] * one if row else vals[None, :] * one
        data[..., direction] = 1.0
        return Jet(data, 1)

    C = ns_matern_gram(t, seed(ell, 1, True), seed(sig, 3, True), nu,
                       t, seed(ell, 2, False), seed(sig, 4, False))
    return C.data[..., 0], C.data[..., 1], C.data[..., 3]


def _gp_nll(u, C, what):
    cf = _chol(C, what)
    a = cho_solve(cf, u)
    val = 0.5 * (u @ a + _logdet(cf) + u.size * _LOG2PI)
    return val, a, cf


def objective_batch(v, problem: RegProblem):
    """Negative log joint density with Gram-matrix priors.  Returns ``(value, gradient)``."""
    p = problem
    u1, u2, u3 = p.split(v)
    tf = p.transform
    ell, sig = tf.forward(u2), tf.forward(u3)
    val, dr, _ = _gauss_term(p.y - u1, p.Xi)
    val = val.sum()
    g1 = -dr
    C1, dCl, dCs = _ns_gram_partials(p.t, ell, sig, p.nu)
    v1, a1, cf1 = _gp_nll(u1, C1, "C1")
    val += v1
    g1 = g1 + a1
    W = cho_solve(cf1, np.eye(p.T)) - np.outer(a1, a1)
    g2 = (W * dCl).sum(1) * transform_derivative(tf, u2)
    g3 = (W * dCs).sum(1) * transform_derivative(tf, u3)
    for u, leaf, gi in ((u2, p.leaf2, 2), (u3, p.leaf3, 3)):
        vl, al, _ = _gp_nll(u, matern_gram(p.t, leaf), f"C{gi}")
        val += vl
        if gi == 2:
            g2 = g2 + al
        else:
            g3 = g3 + al
    return float(val), np.concatenate([g1, g2, g3])


def objective(v, problem: RegProblem):
    fn = objective_batch if problem.mode == "batch" else objective_statespace
    return fn(v, problem)


# -- ADMM -----------------------------------------------------------------------------

def soft_threshold(x, kappa):
    """``sign(x) max(|x| - kappa, 0)`` elementwise."""
    if np.any(np.asarray(kappa) < 0):
        raise ValueError("threshold must be non-negative")
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - kappa, 0.0)


@dataclass
class AdmmState:
    v: np.ndarray
    theta: np.ndarray
    eta: np.ndarray
    iteration: int = 0
    history: list = field(default_factory=list)
    residuals: list = field(default_factory=list)

    def __post_init__(self):
        if not (self.theta.shape == self.eta.shape and self.theta.shape[1] * 3 == self.v.size):
            raise ValueError("inconsistent ADMM state shapes")


@dataclass
class AdmmResult:
    state: AdmmState
    u1: np.ndarray
    u2: np.ndarray
    u3: np.ndarray
    converged: bool

    def to_csv(self, path, t) -> None:
        th, et = self.state.theta, self.state.eta
        cols = np.column_stack([np.arange(len(t)), t, self.u1, self.u2, self.u3, th.T, et.T])
        header = "k,t,u1,u2,u3,theta1,theta2,theta3,eta1,eta2,eta3"
        np.savetxt(path, cols, delimiter=",", header=header, comments="", fmt="%.12g")

    def convergence_csv(self, path) -> None:
        s = self.state
        cols = np.column_stack([np.arange(1, len(s.history) + 1), s.history, s.residuals])
        np.savetxt(path, cols, delimiter=",", header="iter,lagrangian,primal_residual", comments="", fmt="%.15g")


def _phi_v(problem, v):
    return np.stack([P @ u for P, u in zip(problem.Phi, problem.split(v))])


def augmented_lagrangian(problem: RegProblem, v, theta, eta) -> float:
    f, _ = objective(v, problem)
    c = _phi_v(problem, v) - theta
    rho = problem.rho[:, None]
    return float(f + np.sum(problem.lam[:, None] * np.abs(theta)) + np.sum(eta * c) + 0.5 * np.sum(rho * c * c))


def _v_step(problem, v0, theta, eta, opts):
    rho = problem.rho

    def fun(v):
        f, g = objective(v, problem)
        us = problem.split(v)
        gs = []
        for i, (P, u) in enumerate(zip(problem.Phi, us)):
            c = P @ u - theta[i] + eta[i] / rho[i]
            f += 0.5 * rho[i] * c @ c
            gs.append(rho[i] * (P.T @ c))
        g = g + np.concatenate(gs)
        if not np.isfinite(f):
            raise FloatingPointError("inner objective is not finite")
        return f, g

    res = minimize(fun, v0, jac=True, method="L-BFGS-B",
                   options={"gtol": opts.get("gtol", 1e-6), "maxiter": opts.get("maxiter", 200)})
    if not np.all(np.isfinite(res.x)):
        raise FloatingPointError(f"inner optimiser produced non-finite iterate: {res.x}")
    return res.x


def admm_solve(problem: RegProblem, init=None, iters: int = 100, inner_opts: Optional[dict] = None,
               tol: float = 0.0) -> AdmmResult:
    """Alternate the smooth ``v`` subproblem, soft thresholding and the multiplier step.

    Parameters
    ----------
    problem : RegProblem
    init : array_like, optional
        Starting ``v`` (length ``3T``); defaults to ``(y, 0, 0)``.
    iters : int
    inner_opts : dict, optional
        ``gtol`` and ``maxiter`` of the L-BFGS ``v`` solver.
    tol : float
        Stop early once the primal residual falls below ``tol``.
    """
    if iters < 1:
        raise ValueError("iters must be at least 1")
    opts = dict(inner_opts or {})
    T = problem.T
    v = np.concatenate([problem.y, np.zeros(2 * T)]) if init is None else np.asarray(init, float).copy()
    if v.size != 3 * T:
        raise ValueError(f"init must have length {3 * T}")
    theta = _phi_v(problem, v)
    eta = np.zeros((3, T))
    st = AdmmState(v, theta, eta)
    kappa = (problem.lam / problem.rho)[:, None]
    converged = False
    for it in range(1, iters + 1):
        v = _v_step(problem, v, theta, eta, opts)
        Pv = _phi_v(problem, v)
        theta = soft_threshold(Pv + eta / problem.rho[:, None], kappa)
        eta = eta + problem.rho[:, None] * (Pv - theta)
        st.v, st.theta, st.eta, st.iteration = v, theta, eta, it
        st.history.append(augmented_lagrangian(problem, v, theta, eta))
        st.residuals.append(float(np.linalg.norm(Pv - theta)))
        if not np.isfinite(st.history[-1]):
            raise FloatingPointError(f"augmented Lagrangian diverged at iteration {it}")
        if tol > 0 and st.residuals[-1] < tol:
            converged = True
            break
    u1, u2, u3 = problem.split(v)
    return AdmmResult(st, u1, u2, u3, converged or (tol == 0.0))


def map_estimate(problem: RegProblem, init=None, gtol: float = 1e-6, maxiter: int = 5000):
    """Unregularised MAP of ``v`` by L-BFGS on the chosen objective.

    Returns ``(u1, u2, u3, optimize_result)``.
    """
    T = problem.T
    v0 = np.concatenate([problem.y, np.zeros(2 * T)]) if init is None else np.asarray(init, float)
    res = minimize(lambda v: objective(v, problem), v0, jac=True, method="L-BFGS-B",
                   options={"gtol": gtol, "maxiter": maxiter})
    if not np.all(np.isfinite(res.x)):
        raise FloatingPointError("MAP optimiser produced a non-finite iterate")
    return (*problem.split(res.x), res)


# -- uncertainty --------------------------------------------------------------------------

def _discrete_kfs(F, Q, H, R, y, m0, P0):
    """Kalman filter and RTS smoother for ``x_k = F_k x_{k-1} + q``, ``y_k = H x_k + r``."""
    T, d = len(y), m0.size
    mf, Pf = np.zeros((T, d)), np.zeros((T, d, d))
    mp, Pp = np.zeros((T, d)), np.zeros((T, d, d))
    m, P = m0, P0
    for k in range(T):
        if k > 0:
            m, P = F[k] @ m, F[k] @ P @ F[k].T + Q[k]
        mp[k], Pp[k] = m, P
        S = H @ P @ H + R[k]
        K = P @ H / S
        m = m + K * (y[k] - H @ m)
        P = P - np.outer(K, K) * S
        mf[k], Pf[k] = m, 0.5 * (P + P.T)
    ms, Ps = mf.copy(), Pf.copy()
    for k in range(T - 2, -1, -1):
        G = np.linalg.solve(Pp[k + 1].T, (Pf[k] @ F[k + 1].T).T).T
        ms[k] = mf[k] + G @ (ms[k + 1] - mp[k + 1])
        Ps[k] = Pf[k] + G @ (Ps[k + 1] - Pp[k + 1]) @ G.T
        Ps[k] = 0.5 * (Ps[k] + Ps[k].T)
    return ms, Ps


def map_uncertainty(map_u2, map_u3, problem: RegProblem, mode: Optional[str] = None):
    """Posterior mean and variance of ``u1`` with the parents fixed at their MAP values.

    ``mode="batch"`` conditions on the non-stationary Gram matrix; ``"statespace"``
    freezes each step's Matérn coefficients at the MAP parents and runs a
    Kalman filter and RTS smoother.  Returns ``(mean, var)``; the batch mode
    also returns the full covariance as a third item.
    """
    p = problem
    mode = p.mode if mode is None else mode
    ell = p.transform.forward(np.asarray(map_u2, float))
    sig = p.transform.forward(np.asarray(map_u3, float))
    if mode == "batch":
        C = ns_matern_gram(p.t, ell, sig, p.nu)
        cf = _chol(C + np.diag(p.Xi), "C1 + Xi")
        m = C @ cho_solve(cf, p.y)
        P = C - C @ cho_solve(cf, C)
        P = 0.5 * (P + P.T)
        return m, np.diag(P).copy(), P
    if mode != "statespace":
        raise ValueError("mode must be 'batch' or 'statespace'")
    g = int(round(p.nu + 0.5))
    F = np.zeros((p.T, g, g))
    Q = np.zeros((p.T, g, g))
    for k in range(1, p.T):
        ss = matern_ssm(MaternParams(p.nu, float(ell[k - 1]), float(sig[k - 1])))
        F[k], Q[k] = exact_linear(ss.A, np.outer(ss.B, ss.B), p.t[k] - p.t[k - 1])
    P0 = matern_ssm(MaternParams(p.nu, float(ell[0]), float(sig[0]))).P0
    H = np.zeros(g)
    H[0] = 1.0
    ms, Ps = _discrete_kfs(F, Q, H, p.Xi, p.y, np.zeros(g), P0)
    return ms[:, 0], Ps[:, 0, 0]
