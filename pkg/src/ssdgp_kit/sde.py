"""SDE models and the (iterated) infinitesimal generator."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import jet as dm
from .jet import Jet, lift, value_grad_hess

__all__ = [
    "GeneratorDepthError",
    "SdeModel",
    "LinearSdeModel",
    "SmoothScalarField",
    "FieldMatrix",
    "FdReport",
    "apply_generator",
    "apply_generator_elementwise",
    "generator_terms",
    "finite_difference_check",
    "as_states",
    "benes",
    "ornstein_uhlenbeck",
    "duffing_van_der_pol",
    "softplus_2d",
    "coordinated_turn_3d",
    "linear_model",
    "with_clock",
]


class GeneratorDepthError(ValueError):
    """Raised when a field has no smoothness left for another generator."""


def as_states(x, d: int) -> tuple[np.ndarray, bool]:
    """Return states as ``(d, *batch)`` and whether ``x`` was a single vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[0] != d:
        raise ValueError(f"state has leading dimension {x.shape[0]}, expected {d}")
    if x.ndim == 1:
        return x[:, None], True
    return x, False


def _stack_vector(out):
    if isinstance(out, (Jet, np.ndarray)):
        return out
    return dm.stack(out)


def _stack_matrix(out):
    if isinstance(out, (Jet, np.ndarray)):
        return out
    return dm.stack([dm.stack(row) for row in out])


def _pad_for_output(arr, lead: int, nout: int, nb: int):
    """Reshape ``(lead..., *gb)`` so it broadcasts against ``(lead..., *out, *xb)``."""
    shape = arr.shape
    tail = shape[lead:]
    if len(tail) == 0:
        new = shape[:lead] + (1,) * (nout + nb)
    else:
        new = shape[:lead] + (1,) * nout + tail
    return arr.reshape(new)


@dataclass(frozen=True)
class SdeModel:
    """Time-homogeneous Itô SDE ``dX = a(X) dt + b(X) dW``.

    Parameters
    ----------
    drift : callable
        Maps a state batch ``x`` of shape ``(d, *batch)`` (array or jet) to
        ``d`` components, as a sequence or a stacked array.  Use the functions
        of :mod:`ssdgp_kit.jet` for nonlinearities so the callback can be
        differentiated.
    dispersion : callable
        Maps ``x`` to a ``d x w`` nested sequence (or stacked array).
    dim_state, dim_wiener : int
    differentiation_depth : int
        Maximum number of derivative orders the callbacks support.  Each
        generator application consumes two.
    constant_dispersion : bool
        Hint that ``b`` does not depend on the state.
    """

    drift: Callable
    dispersion: Callable
    dim_state: int
    dim_wiener: int
    differentiation_depth: int = 8
    name: str = "sde"
    constant_dispersion: bool = False

    @property
    def max_order(self) -> int:
        return self.differentiation_depth // 2

    def a(self, x):
        return _stack_vector(self.drift(x))

    def b(self, x):
        return _stack_matrix(self.dispersion(x))

    def gamma(self, x):
        """Diffusion matrix ``b b^T`` with shape ``(d, d, *batch)``."""
        b = self.b(x)
        if isinstance(b, Jet):
            return (b[:, None] * b[None, :]).sum(axis=2)
        b = np.asarray(b, dtype=float)
        return np.einsum("ik...,jk...->ij...", b, b)

    def drift_at(self, x) -> np.ndarray:
        """Drift at a single state or a batch of states (plain arrays)."""
        xs, single = as_states(x, self.dim_state)
        a = _pad_for_output(np.asarray(self.a(xs), dtype=float), 1, 0, xs.ndim - 1)
        a = np.broadcast_to(a, xs.shape)
        return a[:, 0].copy() if single else np.array(a)

    def gamma_at(self, x) -> np.ndarray:
        """Diffusion matrix at a single state or a batch of states."""
        xs, single = as_states(x, self.dim_state)
        g = _pad_for_output(np.asarray(self.gamma(xs), dtype=float), 2, 0, xs.ndim - 1)
        g = np.broadcast_to(g, (self.dim_state,) + xs.shape)
        return g[:, :, 0].copy() if single else np.array(g)


@dataclass(frozen=True)
class LinearSdeModel:
    """Linear SDE ``dU = A(t) U dt + B(t) dW`` with a Gaussian initial law.

    ``A`` and ``B`` are arrays or callables of time.  ``discretisation``
    selects how time-varying coefficients are propagated between
    measurements: ``"rk4"`` integrates the moment ODEs, ``"frozen"`` freezes
    the coefficients at the left end of every step.
    """

    A: object
    B: object
    m0: np.ndarray
    P0: np.ndarray
    discretisation: str = "rk4"
    rk4_substeps: int = 16

    def __post_init__(self):
        P0 = np.atleast_2d(np.asarray(self.P0, dtype=float))
        if np.abs(P0 - P0.T).max() > 1e-10 * max(1.0, np.abs(P0).max()):
            raise ValueError("P0 must be symmetric")
        if np.linalg.eigvalsh(0.5 * (P0 + P0.T)).min() < -1e-9 * max(1.0, np.abs(P0).max()):
            raise ValueError("P0 must be positive semi-definite")
        object.__setattr__(self, "P0", P0)
        object.__setattr__(self, "m0", np.atleast_1d(np.asarray(self.m0, dtype=float)))
        if self.discretisation not in ("rk4", "frozen"):
            raise ValueError("discretisation must be 'rk4' or 'frozen'")

    @property
    def dim_state(self) -> int:
        return self.m0.shape[0]

    @property
    def time_varying(self) -> bool:
        return callable(self.A) or callable(self.B)

    def A_at(self, t) -> np.ndarray:
        return np.atleast_2d(np.asarray(self.A(t) if callable(self.A) else self.A, dtype=float))

    def B_at(self, t) -> np.ndarray:
        B = np.asarray(self.B(t) if callable(self.B) else self.B, dtype=float)
        return B.reshape(self.dim_state, -1)

    def as_sde(self) -> SdeModel:
        """Time-homogeneous nonlinear-API view (constant coefficients only)."""
        if self.time_varying:
            raise ValueError("time-varying linear models need with_clock augmentation")
        A, B = self.A_at(0.0), self.B_at(0.0)

        def drift(x):
            return [sum(A[i, j] * x[j] for j in range(A.shape[1]) if A[i, j] != 0.0) + 0.0 * x[0]
                    for i in range(A.shape[0])]

        def disp(x):
            return B

        return SdeModel(drift, disp, A.shape[0], B.shape[1], name="linear", constant_dispersion=True)


# -- generator -------------------------------------------------------------

def _xb_ndim(x) -> int:
    return (len(x.shape) if isinstance(x, Jet) else np.ndim(x)) - 1


def _generate(g, h, a, G, nout: int, nb: int):
    """``g . a + 0.5 tr(G h)`` with output axes between state and batch axes."""
    a = _pad_for_output(a, 1, nout, nb)
    G = _pad_for_output(G, 2, nout, nb)
    return (g * a).sum(0) + 0.5 * (h * G).sum(0).sum(0)


def generator_terms(fn: Callable, model: SdeModel, x, order: int) -> list:
    """Evaluate ``[phi, A phi, ..., A^order phi]`` at a batch of states.

    Parameters
    ----------
    fn : callable
        Field callback mapping ``(d, *batch)`` to ``(*out, *batch)``.
    model : SdeModel
    x : ndarray or Jet
        States of shape ``(d, *batch)``.
    order : int
        Number of generator iterations.
    """
    if order == 0:
        return [fn(x)]
    d = model.dim_state
    nb = _xb_ndim(x)
    inner = generator_terms(fn, model, lift(x, 2), order - 1)
    a = model.a(x)
    G = model.gamma(x)
    out = []
    for k, F in enumerate(inner):
        if not isinstance(F, Jet):
            F = np.asarray(F, dtype=float)
            if k == 0:
                out.append(F)
            out.append(np.zeros_like(F))
            continue
        val, g, h = value_grad_hess(F, 0, d)
        nout = (g.ndim if isinstance(g, Jet) else g.ndim) - 1 - nb
        if k == 0:
            out.append(val)
        out.append(_generate(g, h, a, G, nout, nb))
    return out


class SmoothScalarField:
    """Scalar field on the state space with exact derivatives.

    Parameters
    ----------
    fn : callable
        Maps states ``(d, *batch)`` to values of shape ``batch``.
    dim : int
        State dimension.
    smoothness_order : int
        Number of derivative orders still available.
    iteration : int
        How many generator applications produced this field.
    """

    def __init__(self, fn: Callable, dim: int, smoothness_order: int = 8, iteration: int = 0, name: str = "phi"):
        self.fn = fn
        self.dim = int(dim)
        self.smoothness_order = int(smoothness_order)
        self.iteration = int(iteration)
        self.name = name

    def __repr__(self):
        return f"SmoothScalarField({self.name}, dim={self.dim}, smoothness={self.smoothness_order})"

    def evaluate(self, x):
        xs, single = as_states(x, self.dim)
        v = np.broadcast_to(np.asarray(self.fn(xs), dtype=float), xs.shape[1:])
        return float(v[0]) if single else np.array(v)

    __call__ = evaluate

    def gradient(self, x):
        xs, single = as_states(x, self.dim)
        _, g, _ = value_grad_hess(self.fn(lift(xs, 2)), 0, self.dim)
        g = np.broadcast_to(np.asarray(g, float), xs.shape)
        return g[:, 0].copy() if single else np.array(g)

    def hessian(self, x):
        xs, single = as_states(x, self.dim)
        _, _, h = value_grad_hess(self.fn(lift(xs, 2)), 0, self.dim)
        h = np.broadcast_to(np.asarray(h, float), (self.dim,) + xs.shape)
        return h[:, :, 0].copy() if single else np.array(h)

    # linear combinations, handy for tests and user code
    def __add__(self, other):
        return SmoothScalarField(lambda x: self.fn(x) + other.fn(x), self.dim,
                                 min(self.smoothness_order, other.smoothness_order),
                                 max(self.iteration, other.iteration))

    def __mul__(self, c: float):
        return SmoothScalarField(lambda x: self.fn(x) * float(c), self.dim, self.smoothness_order, self.iteration)

    __rmul__ = __mul__


class FieldMatrix:
    """Matrix-valued field whose entries are smooth scalar fields.

    ``fn`` maps states ``(d, *batch)`` to ``(rows, cols, *batch)``.
    """

    def __init__(self, fn: Callable, shape: tuple, dim: int, smoothness_order: int = 8, iteration: int = 0):
        self.fn = fn
        self.shape = tuple(shape)
        self.dim = int(dim)
        self.smoothness_order = int(smoothness_order)
        self.iteration = int(iteration)

    def evaluate(self, x):
        xs, single = as_states(x, self.dim)
        v = np.asarray(self.fn(xs), dtype=float)
        v = np.broadcast_to(v.reshape(self.shape + (1,) * (xs.ndim - 1 - (v.ndim - 2)) + v.shape[2:]), self.shape + xs.shape[1:])
        return v[..., 0].copy() if single else np.array(v)

    __call__ = evaluate

    def entry(self, i: int, j: int) -> SmoothScalarField:
        return SmoothScalarField(lambda x: self.fn(x)[i][j], self.dim, self.smoothness_order, self.iteration)

    @classmethod
    def from_entries(cls, entries, dim: int) -> "FieldMatrix":
        rows = [list(r) for r in entries]
        shape = (len(rows), len(rows[0]))
        if any(len(r) != shape[1] for r in rows):
            raise ValueError("ragged field matrix")
        if any(e.dim != dim for r in rows for e in r):
            raise ValueError("all entries must share the state dimension")
        sm = min(e.smoothness_order for r in rows for e in r)
        it = max(e.iteration for r in rows for e in r)

        def fn(x):
            return dm.stack([dm.stack([e.fn(x) for e in r]) for r in rows])

        return cls(fn, shape, dim, sm, it)


def _check_depth(obj, model: SdeModel):
    nxt = obj.iteration + 1
    if obj.smoothness_order < 2 or 2 * nxt > model.differentiation_depth:
        raise GeneratorDepthError(
            f"generator depth exceeded: iteration {nxt} requested, "
            f"smoothness_order={obj.smoothness_order}, differentiation_depth={model.differentiation_depth}")


def apply_generator(field: SmoothScalarField, model: SdeModel) -> SmoothScalarField:
    """Infinitesimal generator ``grad(phi).a + 0.5 tr(Gamma H phi)`` of a field."""
    if field.dim != model.dim_state:
        raise ValueError("field and model state dimensions differ")
    _check_depth(field, model)
    fn = field.fn
    return SmoothScalarField(lambda x: generator_terms(fn, model, x, 1)[1], field.dim,
                             field.smoothness_order - 2, field.iteration + 1, f"A{field.name}")


def apply_generator_elementwise(fields: FieldMatrix, model: SdeModel) -> FieldMatrix:
    """Entrywise generator of a matrix field; the shape is preserved."""
    if fields.dim != model.dim_state:
        raise ValueError("field and model state dimensions differ")
    _check_depth(fields, model)
    fn = fields.fn
    return FieldMatrix(lambda x: generator_terms(fn, model, x, 1)[1], fields.shape, fields.dim,
                       fields.smoothness_order - 2, fields.iteration + 1)


@dataclass
class FdReport:
    """Worst relative discrepancy between exact and finite-difference derivatives."""

    grad_error: float
    hess_error: float
    hess_asymmetry: float
    n_points: int


def finite_difference_check(field: SmoothScalarField, points, eps: float = 1e-5) -> FdReport:
    """Compare gradient and Hessian of ``field`` with central differences.

    Errors are ``|exact - fd| / max(1, |fd|)`` maximised over points and
    entries.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[-1] != field.dim and pts.shape[0] == field.dim:
        pts = pts.T
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    X = pts.T  # (d, n)
    d = field.dim
    g = field.gradient(X)
    h = field.hessian(X)
    gfd = np.empty_like(g)
    hfd = np.empty_like(h)
    for i in range(d):
        e = np.zeros((d, 1))
        e[i] = eps
        gfd[i] = (field.evaluate(X + e) - field.evaluate(X - e)) / (2 * eps)
        hfd[i] = (field.gradient(X + e) - field.gradient(X - e)) / (2 * eps)
    ge = np.max(np.abs(g - gfd) / np.maximum(1.0, np.abs(gfd)))
    he = np.max(np.abs(h - hfd) / np.maximum(1.0, np.abs(hfd)))
    asym = np.max(np.abs(h - np.swapaxes(h, 0, 1)))
    return FdReport(float(ge), float(he), float(asym), X.shape[1])


# -- built-in models -------------------------------------------------------

def benes() -> SdeModel:
    """Scalar model with ``a(x) = tanh(x)`` and unit dispersion."""
    return SdeModel(lambda x: [dm.tanh(x[0])], lambda x: [[1.0]], 1, 1, name="benes", constant_dispersion=True)


def ornstein_uhlenbeck(lam: float = 1.0, b: float = 1.0) -> SdeModel:
    """``dX = -lam X dt + b dW``."""
    return SdeModel(lambda x: [-lam * x[0]], lambda x: [[b]], 1, 1, name="ou", constant_dispersion=True)


def duffing_van_der_pol(kappa: float = 2.0) -> SdeModel:
    """Duffing--van der Pol oscillator with state-multiplicative noise."""

    def drift(x):
        return [x[1], x[0] * (kappa - x[0] * x[0]) - x[1]]

    def disp(x):
        return [[0.0 * x[0]], [x[0]]]

    return SdeModel(drift, disp, 2, 1, name="duffing_van_der_pol")


def softplus_2d(kappa: float) -> SdeModel:
    """Two coupled softplus-drift components with unit dispersion."""

    def drift(x):
        return [dm.softplus(x[0]) + kappa * x[1], dm.softplus(x[1]) + kappa * x[0]]

    return SdeModel(drift, lambda x: np.eye(2), 2, 2, name="softplus_2d", constant_dispersion=True)


def coordinated_turn_3d(q_vel: float = 0.1, q_turn: float = 0.01) -> SdeModel:
    """Coordinated turn in 3-D with state ``[x, vx, y, vy, z, vz, omega]``.

    White-noise accelerations (scale ``q_vel``) drive the velocities and a
    Brownian turn rate (scale ``q_turn``) drives ``omega``.
    """

    def drift(x):
        w = x[6]
        return [x[1], -w * x[3], x[3], w * x[1], x[5], 0.0 * x[5], 0.0 * x[6]]

    B = np.zeros((7, 4))
    B[1, 0] = B[3, 1] = B[5, 2] = q_vel
    B[6, 3] = q_turn
    return SdeModel(drift, lambda x: B, 7, 4, name="coordinated_turn_3d", constant_dispersion=True)


def linear_model(A, B) -> SdeModel:
    """``dX = A X dt + B dW`` with constant coefficients (nonlinear API)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    return LinearSdeModel(A, B, np.zeros(A.shape[0]), np.eye(A.shape[0])).as_sde()


def with_clock(drift_t: Callable, dispersion_t: Callable, dim_state: int, dim_wiener: int,
               differentiation_depth: int = 8) -> SdeModel:
    """Augment a time-varying SDE with a clock component.

    ``drift_t(x, t)`` and ``dispersion_t(x, t)`` see the original state and
    time.  The returned model has state ``[x, t]`` with unit clock drift and
    no clock noise.
    """

    def drift(z):
        xs = z[:dim_state]
        t = z[dim_state]
        out = list(_stack_vector(drift_t(xs, t)))
        return out + [1.0 + 0.0 * t]

    def disp(z):
        xs = z[:dim_state]
        t = z[dim_state]
        rows = [list(r) for r in _stack_matrix(dispersion_t(xs, t))]
        return rows + [[0.0 * t] * dim_wiener]

    return SdeModel(drift, disp, dim_state + 1, dim_wiener, differentiation_depth, name="clocked")
