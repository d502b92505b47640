"""Order-2 truncated Taylor propagation (jets) through array code.

A :class:`Jet2` carries, alongside each value, its first derivatives with
respect to the network inputs (spatial coordinates plus time) and a chosen
subset of spatial second derivatives. Propagating jets forward through the
flow yields exactly the derivatives the PDE residual needs, without nested
gradient sweeps.

Second derivatives are stored packed: a :class:`JetSpec` fixes an ordered
tuple of index pairs ``(i, j)`` with ``i <= j``, and ``h[..., p]`` holds the
mixed derivative for pair ``p``. The order-2 chain rule for entry ``(i, j)``
only ever combines entry ``(i, j)`` with products of first derivatives ``i``
and ``j``, so tracking a subset is exact, not an approximation. Problems
with sparse diffusion track only the pairs they need.

Jet components may be plain arrays or tape tensors; anything that never
touches a parameter stays a plain array, which acts as free constant
folding when gradients are recorded.
"""

from __future__ import annotations

import numpy as np

from . import tape as T

__all__ = [
    "JetSpec",
    "Jet2",
    "seed_spatial",
    "seed_time",
    "jexp",
    "jlog",
    "jtanh",
    "jsquare",
    "jsum",
    "jconcat",
    "junsqueeze",
    "jwhere",
    "jlinear",
    "component",
]


class JetSpec:
    """Derivative layout: spatial dimension, tracked pairs, first-order flag."""

    __slots__ = ("d", "pairs", "first_order", "pi", "pj")

    def __init__(self, d, pairs=(), first_order=True):
        pairs = tuple((int(i), int(j)) for i, j in pairs)
        if d < 1:
            raise ValueError("spatial dimension must be >= 1")
        seen = set()
        for i, j in pairs:
            if not (0 <= i <= j < d):
                raise ValueError(f"bad derivative pair ({i}, {j}) for d={d}")
            if (i, j) in seen:
                raise ValueError(f"duplicate derivative pair ({i}, {j})")
            seen.add((i, j))
        if pairs and not first_order:
            raise ValueError("second derivatives require first-order tracking")
        self.d = d
        self.pairs = pairs
        self.first_order = bool(first_order)
        self.pi = np.array([i for i, _ in pairs], dtype=np.intp)
        self.pj = np.array([j for _, j in pairs], dtype=np.intp)

    @property
    def K(self):
        """Width of the first-derivative axis (spatial dims plus time)."""
        return self.d + 1 if self.first_order else 0

    @property
    def P(self):
        return len(self.pairs)

    @property
    def time_index(self):
        return self.d

    @classmethod
    def full(cls, d):
        """All spatial second derivatives (upper triangle)."""
        return cls(d, tuple((i, j) for i in range(d) for j in range(i, d)))

    @classmethod
    def values_only(cls, d):
        """No derivative tracking; jets degenerate to values."""
        return cls(d, (), first_order=False)

    @classmethod
    def for_diffusion(cls, d, pairs):
        return cls(d, tuple(sorted(set((min(i, j), max(i, j)) for i, j in pairs))))

    def __eq__(self, other):
        return (
            isinstance(other, JetSpec)
            and self.d == other.d
            and self.pairs == other.pairs
            and self.first_order == other.first_order
        )

    def __repr__(self):
        return f"JetSpec(d={self.d}, pairs={self.pairs}, first_order={self.first_order})"


def _exp_last(c):
    # append a broadcast axis so a value-shaped factor hits every derivative slot
    if isinstance(c, T.Tensor):
        return T.unsqueeze(c, c.ndim)
    c = np.asarray(c)
    return c if c.ndim == 0 else c[..., None]


def _shape(x):
    return np.shape(T.raw(x))


class Jet2:
    """Value plus packed first/second derivatives; see module docstring."""

    __slots__ = ("spec", "value", "g", "h")
    __array_ufunc__ = None  # ndarray <op> Jet2 must hit the r-dunders below

    def __init__(self, spec, value, g, h):
        self.spec = spec
        self.value = value
        self.g = g
        self.h = h

    @classmethod
    def const(cls, value, spec):
        """Jet with zero derivatives (value may still be parameter-dependent)."""
        s = _shape(value)
        return cls(
            spec,
            value,
            np.broadcast_to(0.0, s + (spec.K,)),
            np.broadcast_to(0.0, s + (spec.P,)),
        )

    @property
    def shape(self):
        return _shape(self.value)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Jet2):
            return Jet2(
                self.spec,
                self.value + other.value,
                self.g + other.g,
                self.h + other.h,
            )
        return Jet2(self.spec, self.value + other, self.g, self.h)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Jet2):
            return Jet2(
                self.spec,
                self.value - other.value,
                self.g - other.g,
                self.h - other.h,
            )
        return Jet2(self.spec, self.value - other, self.g, self.h)

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        return Jet2(self.spec, -self.value, -self.g, -self.h)

    def __mul__(self, other):
        spec = self.spec
        if isinstance(other, Jet2):
            av, bv = self.value, other.value
            g = _exp_last(av) * other.g + _exp_last(bv) * self.g
            h = _exp_last(av) * other.h + _exp_last(bv) * self.h
            if spec.P:
                agi = T.take_last(self.g, spec.pi)
                agj = T.take_last(self.g, spec.pj)
                bgi = T.take_last(other.g, spec.pi)
                bgj = T.take_last(other.g, spec.pj)
                h = h + agi * bgj + agj * bgi
            return Jet2(spec, av * bv, g, h)
        ce = _exp_last(other)
        return Jet2(spec, self.value * other, self.g * ce, self.h * ce)

    __rmul__ = __mul__

    def __truediv__(self, other):
        spec = self.spec
        if isinstance(other, Jet2):
            bv = other.value
            cv = T.divide(self.value, bv)
            bve = _exp_last(bv)
            g = T.divide(self.g - _exp_last(cv) * other.g, bve)
            h = self.h - _exp_last(cv) * other.h
            if spec.P:
                cgi = T.take_last(g, spec.pi)
                cgj = T.take_last(g, spec.pj)
                bgi = T.take_last(other.g, spec.pi)
                bgj = T.take_last(other.g, spec.pj)
                h = h - cgi * bgj - cgj * bgi
            return Jet2(spec, cv, g, T.divide(h, bve))
        ce = _exp_last(other)
        return Jet2(
            spec,
            T.divide(self.value, other),
            T.divide(self.g, ce),
            T.divide(self.h, ce),
        )

    def __rtruediv__(self, other):
        return Jet2.const(other, self.spec) / self

    def __getitem__(self, key):
        # basic leading-axis indexing; derivative axes ride along untouched
        return Jet2(self.spec, self.value[key], self.g[key], self.h[key])


T.Tensor._defer_types = (Jet2,)


def seed_spatial(x, spec):
    """Jet for spatial coordinates: identity first derivatives."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if d != spec.d:
        raise ValueError(f"expected {spec.d} spatial columns, got {d}")
    g = np.broadcast_to(np.eye(d, spec.K), (n, d, spec.K))
    h = np.broadcast_to(0.0, (n, d, spec.P))
    return Jet2(spec, x, g, h)


def seed_time(t, spec):
    """Jet for the time coordinate: unit derivative in the time slot."""
    t = np.asarray(t, dtype=np.float64)
    (n,) = t.shape
    row = np.zeros(spec.K)
    if spec.first_order:
        row[spec.time_index] = 1.0
    g = np.broadcast_to(row, (n, spec.K))
    h = np.broadcast_to(0.0, (n, spec.P))
    return Jet2(spec, t, g, h)


def _chain(a, value, d1, d2):
    """Elementwise composition: new value with derivative factors d1, d2."""
    spec = a.spec
    d1e = _exp_last(d1)
    g = d1e * a.g
    h = d1e * a.h
    if spec.P and d2 is not None:
        gi = T.take_last(a.g, spec.pi)
        gj = T.take_last(a.g, spec.pj)
        h = h + _exp_last(d2) * (gi * gj)
    return Jet2(spec, value, g, h)


def jexp(a):
    v = T.exp(a.value)
    return _chain(a, v, v, v)


def jlog(a):
    v = T.log(a.value)
    iv = T.divide(1.0, a.value)
    return _chain(a, v, iv, -(iv * iv))


def jtanh(a):
    v = T.tanh(a.value)
    d1 = 1.0 - T.square(v)
    return _chain(a, v, d1, -2.0 * v * d1)


def jsquare(a):
    return _chain(a, T.square(a.value), 2.0 * a.value, 2.0)


def jsum(a, axis):
    """Sum over a value axis (non-negative index)."""
    if axis < 0:
        raise ValueError("axis must be non-negative")
    return Jet2(
        a.spec,
        T.total(a.value, axis=axis),
        T.total(a.g, axis=axis),
        T.total(a.h, axis=axis),
    )


def jconcat(jets, axis):
    if axis < 0:
        raise ValueError("axis must be non-negative")
    spec = jets[0].spec
    return Jet2(
        spec,
        T.concat([j.value for j in jets], axis=axis),
        T.concat([j.g for j in jets], axis=axis),
        T.concat([j.h for j in jets], axis=axis),
    )


def junsqueeze(a, axis):
    if axis < 0:
        raise ValueError("axis must be non-negative")
    return Jet2(
        a.spec,
        T.unsqueeze(a.value, axis),
        T.unsqueeze(a.g, axis),
        T.unsqueeze(a.h, axis),
    )


def jwhere(mask, a, b):
    """Select between jets elementwise; ``b`` may be a constant scalar."""
    mask = np.asarray(mask, dtype=bool)
    me = mask[..., None]
    if isinstance(b, Jet2):
        return Jet2(
            a.spec,
            T.where(mask, a.value, b.value),
            T.where(me, a.g, b.g),
            T.where(me, a.h, b.h),
        )
    return Jet2(
        a.spec,
        T.where(mask, a.value, b),
        T.where(me, a.g, 0.0),
        T.where(me, a.h, 0.0),
    )


def jlinear(w, a, bias=None):
    """Affine map along value axis 1: weight (out, in), jet (n, in, ...)."""
    v = T.linear_map(w, a.value)
    if bias is not None:
        v = v + T.unsqueeze(bias, 0)
    return Jet2(a.spec, v, T.linear_map(w, a.g), T.linear_map(w, a.h))


def component(arr, k):
    """Slice index ``k`` off the last axis of an array or tensor."""
    return arr[(Ellipsis, k)]
