"""State-space deep Gaussian processes built from conditional Matérn elements."""
from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import jet as dm
from .discretise import PathSample, TransitionPair, euler_maruyama, lcd, psd_sqrt, simulate
from .filtering import MeasurementModel, PosteriorTrack, TimeSeries, gaussian_filter, gaussian_smoother
from .sde import SdeModel
from .ssgp import SUPPORTED_NU, MaternParams, matern_coefficients, matern_ssm
from .tme import tme_discretise

__all__ = [
    "GraphError",
    "Transform",
    "GpElement",
    "DgpGraph",
    "SsdgpModel",
    "build_graph",
    "load_graph",
    "assemble",
    "make_pair",
    "sample_ssdgp",
    "ssdgp_regress",
    "element_summary",
    "mc_cross_covariance",
    "CrossCovariance",
    "example_nu12",
    "example_nu32",
]


class GraphError(ValueError):
    """A DGP specification violates a structural axiom."""


_TRANSFORMS = {
    "exp": (dm.exp, np.exp),
    "softplus": (dm.softplus, lambda u: np.logaddexp(0.0, u)),
    "shifted_arctan": (lambda u: dm.arctan(u) + np.pi / 2, lambda u: np.arctan(u) + np.pi / 2),
}


@dataclass(frozen=True)
class Transform:
    """Positive, monotone, smooth map from a parent value to a hyperparameter."""

    kind: str = "exp"

    def __post_init__(self):
        if self.kind not in _TRANSFORMS:
            raise ValueError(f"unknown transform {self.kind!r}; choose from {sorted(_TRANSFORMS)}")

    def __call__(self, u):
        return _TRANSFORMS[self.kind][0](u)

    def forward(self, u) -> np.ndarray:
        return _TRANSFORMS[self.kind][1](np.asarray(u, dtype=float))


@dataclass(frozen=True)
class GpElement:
    """One conditional Matérn element.

    ``parent_of`` is the index of the element this one parametrises (0 for
    the observed root).  ``ell_parent``/``sigma_parent`` name the elements that
    drive this element's length scale and magnitude; missing roles fall back
    to the fixed ``ell``/``sigma``.
    """

    index: int
    parent_of: int
    nu: float
    ell: Optional[float] = None
    sigma: Optional[float] = None
    ell_parent: Optional[int] = None
    sigma_parent: Optional[int] = None
    transform: Transform = Transform("exp")

    @property
    def dim(self) -> int:
        return int(round(self.nu + 0.5))

    @property
    def is_leaf(self) -> bool:
        return self.ell_parent is None and self.sigma_parent is None


@dataclass(frozen=True)
class DgpGraph:
    """Validated collection of GP elements and their dependency structure."""

    elements: tuple

    @property
    def L(self) -> int:
        return len(self.elements)

    @property
    def J(self) -> dict:
        return {e.index: e.parent_of for e in self.elements}

    def parent_sets(self) -> dict:
        """``U^i``: elements that parametrise element ``i`` (``i = 0..L-1``)."""
        out = {i: set() for i in range(self.L)}
        for e in self.elements:
            out.setdefault(e.parent_of, set()).add(e.index)
        return out

    def element(self, i: int) -> GpElement:
        return self.elements[i - 1]


def _element_from_spec(d: dict) -> GpElement:
    allowed = {"index", "parent_of", "nu", "fixed", "parents", "transform"}
    extra = set(d) - allowed
    if extra:
        raise GraphError(f"unknown keys {sorted(extra)} in element spec")
    fixed = d.get("fixed") or {}
    parents = d.get("parents") or {}
    bad = set(parents) - {"length_scale", "magnitude"}
    if bad:
        raise GraphError(f"unknown parent roles {sorted(bad)}")
    return GpElement(
        index=int(d["index"]),
        parent_of=int(d["parent_of"]),
        nu=float(d.get("nu", 0.5)),
        ell=fixed.get("ell"),
        sigma=fixed.get("sigma"),
        ell_parent=parents.get("length_scale"),
        sigma_parent=parents.get("magnitude"),
        transform=Transform(d.get("transform", "exp")),
    )


def build_graph(spec) -> DgpGraph:
    """Validate a DGP specification.

    Parameters
    ----------
    spec : list of dict or dict
        Elements ``{index, parent_of, nu, fixed: {ell, sigma} | parents:
        {length_scale: i, magnitude: i}, transform}`` (optionally wrapped in
        ``{"elements": [...]}``).  :class:`GpElement` instances are accepted
        too.

    Raises
    ------
    GraphError
        Naming the violated axiom.
    """
    if isinstance(spec, dict):
        spec = spec.get("elements", [])
    els = [e if isinstance(e, GpElement) else _element_from_spec(e) for e in spec]
    if not els:
        raise GraphError("graph has no elements")
    idx = sorted(e.index for e in els)
    if idx != list(range(1, len(els) + 1)):
        raise GraphError(f"indices must be 1..L exactly once, got {idx}")
    els.sort(key=lambda e: e.index)
    L = len(els)
    for e in els:
        if not 0 <= e.parent_of < e.index:
            raise GraphError(f"cycle/forward reference: element {e.index} has j={e.parent_of} (need 0 <= j < i)")
        if not any(abs(e.nu - s) < 1e-12 for s in SUPPORTED_NU):
            raise GraphError(f"element {e.index}: unsupported nu={e.nu}")
    if els[0].parent_of != 0:
        raise GraphError("element 1 must have j_1 = 0")
    assigned = {}
    for e in els:
        roles = [(r, p) for r, p in (("length_scale", e.ell_parent), ("magnitude", e.sigma_parent)) if p is not None]
        for role, p in roles:
            if not 1 <= p <= L:
                raise GraphError(f"element {e.index}: {role} parent {p} does not exist")
            if els[p - 1].parent_of != e.index:
                raise GraphError(f"element {e.index}: {role} parent {p} has j={els[p - 1].parent_of}, not {e.index}")
            if p in assigned:
                raise GraphError(f"duplicate child assignment: element {p} drives both {assigned[p]} and "
                                 f"{role} of element {e.index}")
            assigned[p] = f"{role} of element {e.index}"
        if e.ell_parent is None and not (e.ell and e.ell > 0):
            raise GraphError(f"element {e.index}: needs a fixed ell > 0 or a length_scale parent")
        if e.sigma_parent is None and not (e.sigma and e.sigma > 0):
            raise GraphError(f"element {e.index}: needs a fixed sigma > 0 or a magnitude parent")
    for e in els:
        if e.parent_of > 0 and e.index not in assigned:
            raise GraphError(f"element {e.index} points to element {e.parent_of} but has no role there")
    g = DgpGraph(tuple(els))
    # partition axioms: pairwise disjoint and exhaustive
    sets = g.parent_sets()
    union = set()
    for s in sets.values():
        if union & s:
            raise GraphError("parent sets are not pairwise disjoint")
        union |= s
    if union != set(range(1, L + 1)):
        raise GraphError("parent sets do not cover all elements")
    return g


def load_graph(path) -> DgpGraph:
    with open(path, encoding="utf-8") as fh:
        return build_graph(json.load(fh))


@dataclass
class _Block:
    index: int
    slice: slice
    A: np.ndarray
    LL: np.ndarray


class SsdgpModel:
    """Joint nonlinear SDE of a Matérn SS-DGP.

    The state stacks the element states in index order.  Element ``i`` has the
    companion-form Matérn dynamics with ``ell_i = g(parent value)`` and
    ``sigma_i = g(parent value)`` for driven roles.
    """

    def __init__(self, graph: DgpGraph, differentiation_depth: int = 8):
        self.graph = graph
        self.dims = [e.dim for e in graph.elements]
        self.offsets = list(np.cumsum([0] + self.dims[:-1]))
        self.dim_state = int(sum(self.dims))
        self.sde = SdeModel(self._drift, self._dispersion, self.dim_state, graph.L,
                            differentiation_depth, name="ssdgp")
        H = np.zeros((1, self.dim_state))
        H[0, 0] = 1.0
        self.H = H

    # -- hyperparameters --------------------------------------------------------
    def _hyper(self, e: GpElement, x):
        ell = e.ell if e.ell_parent is None else e.transform(x[self.offsets[e.ell_parent - 1]])
        sig = e.sigma if e.sigma_parent is None else e.transform(x[self.offsets[e.sigma_parent - 1]])
        return ell, sig

    def hyperparameters(self, x, i: int):
        """``(ell_i, sigma_i)`` of element ``i`` at plain states ``(D, *batch)``."""
        e = self.graph.element(i)
        x = np.asarray(x, dtype=float)
        ell = e.ell if e.ell_parent is None else e.transform.forward(x[self.offsets[e.ell_parent - 1]])
        sig = e.sigma if e.sigma_parent is None else e.transform.forward(x[self.offsets[e.sigma_parent - 1]])
        return ell, sig

    def selector(self, i: int) -> slice:
        o = self.offsets[i - 1]
        return slice(o, o + self.dims[i - 1])

    # -- SDE callbacks ------------------------------------------------------------
    def _drift(self, x):
        out = []
        for e, o, g in zip(self.graph.elements, self.offsets, self.dims):
            ell, sig = self._hyper(e, x)
            row, _ = matern_coefficients(e.nu, ell, sig)
            for r in range(g - 1):
                out.append(x[o + r + 1])
            last = row[0] * x[o]
            for r in range(1, g):
                last = last + row[r] * x[o + r]
            out.append(last)
        return out

    def _dispersion(self, x):
        zero = 0.0 * x[0]
        rows = [[zero] * self.graph.L for _ in range(self.dim_state)]
        for k, (e, o, g) in enumerate(zip(self.graph.elements, self.offsets, self.dims)):
            ell, sig = self._hyper(e, x)
            _, b = matern_coefficients(e.nu, ell, sig)
            rows[o + g - 1][k] = b + zero
        return rows

    def element_coefficients(self, x) -> list:
        """Frozen ``(A_i, B_i B_i^T)`` per element at plain states ``(D, n)``."""
        x = np.asarray(x, dtype=float)
        n = x.shape[1]
        out = []
        for e, o, g in zip(self.graph.elements, self.offsets, self.dims):
            ell, sig = self.hyperparameters(x, e.index)
            ell = np.broadcast_to(np.asarray(ell, float), (n,))
            sig = np.broadcast_to(np.asarray(sig, float), (n,))
            if not (np.all(np.isfinite(ell)) and np.all(ell > 0)):
                raise FloatingPointError(f"element {e.index}: non-positive or non-finite length scale")
            row, b = matern_coefficients(e.nu, ell, sig)
            A = np.zeros((n, g, g))
            A[:, np.arange(g - 1), np.arange(1, g)] = 1.0
            for r in range(g):
                A[:, g - 1, r] = row[r]
            LL = np.zeros((n, g, g))
            LL[:, g - 1, g - 1] = b**2
            out.append(_Block(e.index, slice(o, o + g), A, LL))
        return out

    # -- initial law ----------------------------------------------------------------
    def initial_cov(self) -> np.ndarray:
        """Block diagonal of stationary covariances with parents at zero."""
        P = np.zeros((self.dim_state, self.dim_state))
        z = np.zeros((self.dim_state, 1))
        for e, o, g in zip(self.graph.elements, self.offsets, self.dims):
            ell, sig = self.hyperparameters(z, e.index)
            p = MaternParams(e.nu, float(np.ravel(ell)[0]), float(np.ravel(sig)[0]))
            P[o:o + g, o:o + g] = matern_ssm(p).P0
        return P


def assemble(graph: DgpGraph, differentiation_depth: int = 8) -> SsdgpModel:
    """Joint SS-DGP model of a validated graph."""
    return SsdgpModel(graph, differentiation_depth)


def example_nu12(ell: float = 2.0, sigma: float = 2.0, transform: str = "exp") -> SsdgpModel:
    """Three-element model: observed OU element driven by two OU leaves."""
    spec = [
        {"index": 1, "parent_of": 0, "nu": 0.5, "parents": {"length_scale": 2, "magnitude": 3}, "transform": transform},
        {"index": 2, "parent_of": 1, "nu": 0.5, "fixed": {"ell": ell, "sigma": sigma}},
        {"index": 3, "parent_of": 1, "nu": 0.5, "fixed": {"ell": ell, "sigma": sigma}},
    ]
    return assemble(build_graph(spec))


def example_nu32(ell: float = 0.5, sigma: float = 2.0, transform: str = "exp") -> SsdgpModel:
    """Three-element model with Matérn 3/2 elements throughout."""
    spec = [
        {"index": 1, "parent_of": 0, "nu": 1.5, "parents": {"length_scale": 2, "magnitude": 3}, "transform": transform},
        {"index": 2, "parent_of": 1, "nu": 1.5, "fixed": {"ell": ell, "sigma": sigma}},
        {"index": 3, "parent_of": 1, "nu": 1.5, "fixed": {"ell": ell, "sigma": sigma}},
    ]
    return assemble(build_graph(spec))


def make_pair(model: SsdgpModel, scheme: str) -> TransitionPair:
    """Transition pair by name: ``lcd``, ``euler_maruyama``/``em``, ``tme(M)``/``tmeM``."""
    s = scheme.lower().replace(" ", "")
    if s == "lcd":
        return lcd(model)
    if s in ("em", "euler_maruyama"):
        return euler_maruyama(model.sde)
    if s.startswith("tme"):
        digits = "".join(ch for ch in s[3:] if ch.isdigit())
        return tme_discretise(model.sde, int(digits) if digits else 2)
    raise ValueError(f"unknown scheme {scheme!r}")


def sample_ssdgp(model: SsdgpModel, scheme: str, grid, seed: int, n_paths: int = 1, init_cov=None) -> PathSample:
    """Draw SS-DGP paths; the initial state is ``N(0, I)`` unless overridden."""
    cov = np.eye(model.dim_state) if init_cov is None else init_cov
    return simulate(model.sde, make_pair(model, scheme), np.zeros(model.dim_state), grid, seed, n_paths, cov)


_FILTERS = {"ekf_style": "taylor", "ekf": "taylor", "ghkf": "gh3", "ckf": "cubature", "ukf": "unscented"}


def ssdgp_regress(model: SsdgpModel, data: TimeSeries, Xi, method: str = "ckf_lcd", order: int = 2,
                  substeps: int = 1, pred_times=None, P0=None) -> PosteriorTrack:
    """Gaussian filtering and smoothing of the joint SS-DGP state.

    ``method`` is ``<filter>_<scheme>`` with filter in ``ekf_style, ghkf, ckf,
    ukf`` and scheme in ``tme, em, lcd`` (e.g. ``ghkf_tme``, ``ckf_tme(3)``).
    ``order`` is the TME order when the name does not carry one.
    """
    filt, _, scheme = method.lower().replace(" ", "").rpartition("_")
    m = re.fullmatch(r"tme\((\d+)\)|tme(\d*)", scheme)
    if m:
        order = int(m.group(1) or m.group(2) or order)
        scheme = "tme"
    if filt not in _FILTERS or scheme not in ("tme", "em", "lcd"):
        raise ValueError(f"unknown regression method {method!r}")
    pair = make_pair(model, f"tme{order}" if scheme == "tme" else scheme)
    meas = MeasurementModel(H=model.H, noise=Xi if np.ndim(Xi) != 1 else np.asarray(Xi, float)[:, None, None])
    P0 = model.initial_cov() if P0 is None else P0
    tr = gaussian_filter(pair, meas, data, _FILTERS[filt], substeps, np.zeros(model.dim_state), P0,
                         pred_times=pred_times)
    return gaussian_smoother(tr)


def element_summary(model: SsdgpModel, track: PosteriorTrack, smoothed: bool = True) -> dict:
    """Per-element posterior of the value component and pushed-through hyperparameters.

    Length scales and magnitudes are reported as ``g(posterior mean)``, not as
    the posterior mean of ``g``.
    """
    m = track.m_smooth if smoothed else track.m_filt
    P = track.P_smooth if smoothed else track.P_filt
    out = {}
    for e, o in zip(model.graph.elements, model.offsets):
        ell, sig = model.hyperparameters(m.T, e.index)
        out[e.index] = {
            "mean": m[:, o].copy(),
            "var": P[:, o, o].copy(),
            "ell": np.broadcast_to(ell, m.shape[:1]).copy(),
            "sigma": np.broadcast_to(sig, m.shape[:1]).copy(),
        }
    return out


@dataclass
class CrossCovariance:
    times: np.ndarray
    cov: np.ndarray
    se: np.ndarray
    n_samples: int


def mc_cross_covariance(model: SsdgpModel, pair: TransitionPair, grid, n_samples: int, seed: int,
                        element_pair=(1, 3), init_cov=None, block: int = 2048, jobs: int = 1) -> CrossCovariance:
    """Monte Carlo covariance between the value components of two elements.

    Paths are simulated in blocks with per-replicate random streams and only
    running moments are kept, so memory does not grow with ``n_samples``.
    Block sums are combined in block order, so ``jobs`` (threads) does not
    change the result.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    grid = np.asarray(grid, dtype=float)
    iu, iv = (model.offsets[i - 1] for i in element_pair)
    D = model.dim_state
    cov0 = np.eye(D) if init_cov is None else np.asarray(init_cov, float)
    L0 = psd_sqrt(cov0)
    T = grid.size
    dts = np.diff(grid)

    def block_sums(start):
        reps = range(start, min(start + block, n_samples))
        noise = np.stack([np.random.default_rng([seed, r]).standard_normal((T, D)) for r in reps])
        acc = np.zeros((8, T))
        x = L0 @ noise[:, 0].T

        def record(k, x):
            u, v = x[iu], x[iv]
            uu, vv, uv = u * u, v * v, u * v
            acc[:, k] = [u.sum(), v.sum(), uv.sum(), uu.sum(), vv.sum(), (uu * v).sum(), (uv * v).sum(),
                         (uu * vv).sum()]

        record(0, x)
        for k, dt in enumerate(dts, start=1):
            f, Q = pair.moments(x, dt)
            L = psd_sqrt(np.moveaxis(Q, -1, 0))
            x = f + np.einsum("nij,nj->in", L, noise[:, k])
            record(k, x)
        return acc

    starts = list(range(0, n_samples, block))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(block_sums, starts))
    else:
        parts = [block_sums(s0) for s0 in starts]
    total = np.zeros((8, T))
    for part in parts:
        total += part
    n = float(n_samples)
    Eu, Ev, Euv, Euu, Evv, Euuv, Euvv, Euuvv = total / n
    a, b = Eu, Ev
    c = Euv - a * b
    w2 = (Euuvv - 2 * b * Euuv - 2 * a * Euvv + b * b * Euu + a * a * Evv + 4 * a * b * Euv - 3 * a * a * b * b)
    var_w = np.maximum(w2 - c**2, 0.0)
    return CrossCovariance(grid, c * n / (n - 1), np.sqrt(var_w / n), n_samples)
