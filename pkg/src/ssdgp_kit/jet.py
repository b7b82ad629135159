"""Nested first-order jets for iterated derivatives.

A jet of level ``n`` over ``D`` components stores, for every batch entry, an
array of shape ``(D,) * n``.  Slot ``s`` of the jet is an infinitesimal
direction space ``R[e_1, ..., e_{D-1}] / (e_i e_j = 0)``; component ``0`` of
a slot is the real part and components ``1..D-1`` the first-order
perturbations.  Nesting ``n`` such slots gives exact mixed partial derivatives
up to order ``n``, which is what iterated second-order operators need.

The batch axes come first, then the ``n`` component axes::

    data.shape == batch_shape + (D,) * level

Plain ``numpy`` arrays act as constants.  The functions at the bottom of this
module (``exp``, ``tanh``, ...) dispatch on the argument type so that model
callbacks can be written once and evaluated on either arrays or jets.
"""
from __future__ import annotations

from math import factorial
from typing import Sequence

import numpy as np

__all__ = [
    "Jet",
    "is_jet",
    "lift",
    "stack",
    "value_grad_hess",
    "first_derivatives",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sin",
    "cos",
    "arctan",
    "softplus",
    "sigmoid",
    "power",
]


def _mul(x, y, n):
    """Truncated product of two component arrays with ``n`` jet slots.

    Perturbation components that are identically zero are skipped, which
    matters for lifted coordinates where each slot carries a single seed.
    """
    if n == 0:
        return x * y
    if x.shape != y.shape:
        x, y = np.broadcast_arrays(x, y)
    ax = x.ndim - n
    pre = (slice(None),) * ax
    D = x.shape[ax]
    if D == 1:
        return _mul(x[pre + (0,)], y[pre + (0,)], n - 1)[pre + (None,)]
    others = tuple(i for i in range(x.ndim) if i != ax)
    tail = pre + (slice(1, None),)
    nzx = np.any(x[tail] != 0, axis=others)
    nzy = np.any(y[tail] != 0, axis=others)
    # pair list: (x part, y part, target component)
    ia, ib, tgt = [0], [0], [0]
    for c in range(1, D):
        if nzy[c - 1]:
            ia.append(0)
            ib.append(c)
            tgt.append(c)
        if nzx[c - 1]:
            ia.append(c)
            ib.append(0)
            tgt.append(c)
    r = _mul(np.take(x, ia, axis=ax), np.take(y, ib, axis=ax), n - 1)
    shape = list(r.shape)
    shape[ax] = D
    z = np.zeros(shape)
    for j, c in enumerate(tgt):
        z[pre + (c,)] += r[pre + (j,)]
    return z


def _binom_general(p, k):
    out = 1.0
    for i in range(k):
        out *= (p - i) / (i + 1)
    return out


def _taylor(kind, x0, n, p=None):
    """Taylor coefficients ``c_k`` of ``g(x0 + s)`` in powers of ``s``."""
    c = [None] * (n + 1)
    if kind == "exp":
        e = np.exp(x0)
        for k in range(n + 1):
            c[k] = e / factorial(k)
    elif kind == "log":
        c[0] = np.log(x0)
        for k in range(1, n + 1):
            c[k] = (-1.0) ** (k + 1) / (k * x0**k)
    elif kind in ("sin", "cos"):
        s, co = np.sin(x0), np.cos(x0)
        cyc = [s, co, -s, -co] if kind == "sin" else [co, -s, -co, s]
        for k in range(n + 1):
            c[k] = cyc[k % 4] / factorial(k)
    elif kind == "tanh":
        t = [np.tanh(x0)]
        w = [1.0 - t[0] ** 2]
        for k in range(1, n + 1):
            t.append(w[k - 1] / k)
            w.append(-sum(t[j] * t[k - j] for j in range(k + 1)))
        c = t
    elif kind in ("sigmoid", "softplus"):
        from scipy.special import expit

        s = [expit(x0)]
        q = [s[0] - s[0] ** 2]
        for k in range(1, n + 1):
            s.append(q[k - 1] / k)
            q.append(s[k] - sum(s[j] * s[k - j] for j in range(k + 1)))
        if kind == "sigmoid":
            c = s
        else:
            c[0] = np.logaddexp(0.0, x0)
            for k in range(1, n + 1):
                c[k] = s[k - 1] / k
    elif kind == "arctan":
        q = [1.0 + x0**2, 2.0 * x0, 1.0]
        r = []
        for k in range(n):
            acc = 1.0 if k == 0 else 0.0
            for j in range(1, min(k, 2) + 1):
                acc = acc - q[j] * r[k - j]
            r.append(acc / q[0])
        c[0] = np.arctan(x0)
        for k in range(1, n + 1):
            c[k] = r[k - 1] / k
    elif kind == "pow":
        for k in range(n + 1):
            c[k] = _binom_general(p, k) * x0 ** (p - k)
    else:
        raise ValueError(f"unknown elementary function {kind!r}")
    return [np.asarray(ck, dtype=float) for ck in c]


class Jet:
    """Batch of nested first-order jets.

    Parameters
    ----------
    data : ndarray
        Array of shape ``batch_shape + (D,) * level``.
    level : int
        Number of nested slots.
    """

    __slots__ = ("data", "level")
    # let numpy binary operators defer to the reflected jet methods
    __array_ufunc__ = None

    def __init__(self, data, level: int):
        self.data = np.asarray(data, dtype=float)
        self.level = int(level)

    # -- structure ---------------------------------------------------------
    @property
    def ncomp(self) -> int:
        return self.data.shape[-1]

    @property
    def shape(self) -> tuple:
        return self.data.shape[: self.data.ndim - self.level]

    @property
    def ndim(self) -> int:
        return self.data.ndim - self.level

    @property
    def real(self) -> np.ndarray:
        return self.data[(Ellipsis,) + (0,) * self.level]

    def _comps(self):
        return self.data.shape[self.data.ndim - self.level:]

    def __repr__(self):
        return f"Jet(shape={self.shape}, level={self.level}, ncomp={self.ncomp})"

    def __len__(self):
        return self.shape[0]

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        if any(i is Ellipsis for i in idx):
            raise IndexError("Ellipsis indexing is not supported on jets")
        return Jet(self.data[idx], self.level)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return Jet(self.data.reshape(tuple(shape) + self._comps()), self.level)

    def sum(self, axis=0):
        if axis < 0:
            axis += self.ndim
        return Jet(self.data.sum(axis=axis), self.level)

    def constant(self, c) -> "Jet":
        """Embed an array as a constant jet compatible with ``self``."""
        c = np.asarray(c, dtype=float)
        data = np.zeros(c.shape + self._comps())
        data[(Ellipsis,) + (0,) * self.level] = c
        return Jet(data, self.level)

    # -- arithmetic --------------------------------------------------------
    def _check(self, other):
        if other.level != self.level or other.ncomp != self.ncomp:
            raise ValueError("incompatible jets: level/components differ")

    def _add_const(self, c, sign=1.0):
        c = np.asarray(c, dtype=float)
        shape = np.broadcast_shapes(self.shape, c.shape)
        data = np.broadcast_to(sign * self.data, shape + self._comps()).copy()
        data[(Ellipsis,) + (0,) * self.level] += c
        return Jet(data, self.level)

    def _expand(self, c):
        c = np.asarray(c, dtype=float)
        return c.reshape(c.shape + (1,) * self.level)

    def __add__(self, other):
        if isinstance(other, Jet):
            self._check(other)
            return Jet(self.data + other.data, self.level)
        return self._add_const(other)

    __radd__ = __add__

    def __neg__(self):
        return Jet(-self.data, self.level)

    def __pos__(self):
        return self

    def __sub__(self, other):
        if isinstance(other, Jet):
            self._check(other)
            return Jet(self.data - other.data, self.level)
        return self._add_const(-np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return self._add_const(other, sign=-1.0)

    def __mul__(self, other):
        if isinstance(other, Jet):
            self._check(other)
            return Jet(_mul(self.data, other.data, self.level), self.level)
        return Jet(self.data * self._expand(other), self.level)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            return self * other.apply("pow", p=-1.0)
        return Jet(self.data / self._expand(other), self.level)

    def __rtruediv__(self, other):
        return self.apply("pow", p=-1.0) * other

    def __pow__(self, p):
        if isinstance(p, Jet):
            return exp(log(self) * p)
        p = float(p)
        if p == 0.0:
            return self.constant(np.ones(self.shape))
        if p == 1.0:
            return self
        if p == 2.0:
            return self * self
        return self.apply("pow", p=p)

    # -- elementary functions ---------------------------------------------
    def apply(self, kind: str, p=None) -> "Jet":
        """Apply an elementary function through its Taylor expansion."""
        x0 = self.real
        c = _taylor(kind, x0, self.level, p)
        delta = self - x0
        out = delta * c[self.level]
        for k in range(self.level - 1, 0, -1):
            out = (out + c[k]) * delta
        if self.level == 0:
            return self.constant(c[0])
        return out + c[0]


def is_jet(x) -> bool:
    return isinstance(x, Jet)


def lift(x, slots: int = 2) -> Jet:
    """Add ``slots`` fresh slots seeded with the identity direction.

    Parameters
    ----------
    x : ndarray or Jet
        State of batch shape ``(d, *batch)``.  An existing jet must already
        use ``d + 1`` components.
    slots : int
        Number of slots to add.

    Returns
    -------
    Jet
        Level ``old_level + slots`` jet whose new slots carry
        ``d/dx_i`` seeds.
    """
    if isinstance(x, Jet):
        d = x.shape[0]
        if x.ncomp != d + 1:
            raise ValueError("jet component count must equal state dimension + 1")
        base, level = x.data, x.level
    else:
        base = np.asarray(x, dtype=float)
        d, level = base.shape[0], 0
    D = d + 1
    nb = base.ndim - level
    data = np.zeros(base.shape + (D,) * slots)
    data[(Ellipsis,) + (0,) * slots] = base
    for s in range(slots):
        for i in range(d):
            idx = [0] * slots
            idx[s] = i + 1
            data[(i,) + (slice(None),) * (nb - 1) + (0,) * level + tuple(idx)] = 1.0
    return Jet(data, level + slots)


def stack(items: Sequence, axis: int = 0):
    """Stack scalars, arrays and jets along a new leading batch axis."""
    items = list(items)
    jets = [it for it in items if isinstance(it, Jet)]
    if not jets:
        return np.stack(np.broadcast_arrays(*[np.asarray(it, dtype=float) for it in items]), axis=axis)
    ref = jets[0]
    shape = np.broadcast_shapes(*[it.shape if isinstance(it, Jet) else np.shape(it) for it in items])
    comps = ref._comps()
    datas = []
    for it in items:
        if isinstance(it, Jet):
            ref._check(it)
            datas.append(np.broadcast_to(it.data, shape + comps))
        else:
            datas.append(np.broadcast_to(ref.constant(np.broadcast_to(np.asarray(it, float), shape)).data, shape + comps))
    return Jet(np.stack(datas, axis=axis), ref.level)


def value_grad_hess(F, nbatch_out: int, d: int):
    """Split a lifted evaluation into value, gradient and Hessian.

    ``F`` is the result of evaluating a field at ``lift(x, 2)``.  Returns
    value of batch shape ``S``, gradient ``(d, *S)`` and Hessian ``(d, d, *S)``
    where ``S`` is the batch shape of ``F``.  Non-jet ``F`` (a constant field)
    gives zero derivatives.
    """
    if not isinstance(F, Jet):
        F = np.asarray(F, dtype=float)
        z = np.zeros((d,) + F.shape)
        return F, z, np.zeros((d, d) + F.shape)
    lvl = F.level - 2
    val = F.data[..., 0, 0]
    g = np.moveaxis(F.data[..., 1:, 0], -1, 0)
    h = np.moveaxis(np.moveaxis(F.data[..., 1:, 1:], -2, 0), -1, 1)
    if lvl == 0:
        return val, g, h
    return Jet(val, lvl), Jet(g, lvl), Jet(h, lvl)


def first_derivatives(F):
    """Value and first derivatives of an evaluation at ``lift(x, 1)``.

    Returns ``(value, J)`` with ``J`` of shape ``(*S, d)`` where ``S`` is the
    batch shape of ``F``.
    """
    if not isinstance(F, Jet):
        return np.asarray(F, dtype=float), None
    lvl = F.level - 1
    val, J = F.data[..., 0], F.data[..., 1:]
    if lvl == 0:
        return val, J
    return Jet(val, lvl), Jet(np.moveaxis(J, -1, -1 - lvl), lvl)


def _dispatch(kind, np_fn):
    def fn(x):
        if isinstance(x, Jet):
            return x.apply(kind)
        return np_fn(np.asarray(x, dtype=float))

    fn.__name__ = kind
    return fn


def _np_softplus(x):
    return np.logaddexp(0.0, x)


def _np_sigmoid(x):
    from scipy.special import expit

    return expit(x)


exp = _dispatch("exp", np.exp)
log = _dispatch("log", np.log)
tanh = _dispatch("tanh", np.tanh)
sin = _dispatch("sin", np.sin)
cos = _dispatch("cos", np.cos)
arctan = _dispatch("arctan", np.arctan)
softplus = _dispatch("softplus", _np_softplus)
sigmoid = _dispatch("sigmoid", _np_sigmoid)


def sqrt(x):
    if isinstance(x, Jet):
        return x.apply("pow", p=0.5)
    return np.sqrt(x)


def power(x, p):
    if isinstance(x, Jet):
        return x ** p
    return np.power(x, p)
