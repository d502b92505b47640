"""Reverse-mode automatic differentiation over numpy arrays.

Gradient tracking uses an explicit tape: every primitive applied to a
tracked value appends one node, so the node list is already a topological
order and ``Tape.backward`` is a single reverse sweep. Node payloads are
float64 numpy arrays; one node can therefore carry a whole batch, which is
what keeps training throughput acceptable in pure Python.

Trainable arrays live in :class:`Param` objects outside any tape. A fresh
tape is built per loss evaluation and lifts each parameter it touches as a
leaf node exactly once.

The module-level helpers (``exp``, ``log``, ``concat``, ...) accept either
a :class:`Tensor` or a bare numpy array and route accordingly, so numeric
code runs identically with and without gradient tracking.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "NumericDomainError",
    "Param",
    "Tensor",
    "Tape",
    "lift",
    "raw",
    "exp",
    "log",
    "log_abs",
    "tanh",
    "square",
    "divide",
    "where",
    "concat",
    "take_last",
    "gather_rows",
    "cumsum",
    "unsqueeze",
    "linear_map",
    "total",
    "mean",
]


class NumericDomainError(ValueError):
    """A primitive was evaluated outside its numeric domain."""


class Param:
    """Trainable float64 array with a stable identity across tapes.

    Optimizer updates must rebind ``value`` to a fresh array instead of
    writing in place: recorded tapes keep references to the old array and
    replay would silently drift otherwise.
    """

    __slots__ = ("value", "name")

    def __init__(self, value, name=""):
        self.value = np.array(value, dtype=np.float64)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


def _unbroadcast(g, shape):
    # adjoint of numpy broadcasting: sum g down to the operand's shape
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive registry
#
# Each op maps to (forward, vjp). forward(values, kw) -> array.
# vjp(bar, out, values, kw) -> list of adjoints aligned with the parents
# (None marks a parent that receives no gradient).

def _fwd_add(v, kw):
    return v[0] + v[1]


def _vjp_add(g, out, v, kw):
    return [_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)]


def _fwd_sub(v, kw):
    return v[0] - v[1]


def _vjp_sub(g, out, v, kw):
    return [_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)]


def _fwd_mul(v, kw):
    return v[0] * v[1]


def _vjp_mul(g, out, v, kw):
    return [_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)]


def _fwd_div(v, kw):
    if np.any(v[1] == 0.0):
        raise NumericDomainError("div: zero denominator")
    return v[0] / v[1]


def _vjp_div(g, out, v, kw):
    return [
        _unbroadcast(g / v[1], v[0].shape),
        _unbroadcast(-g * out / v[1], v[1].shape),
    ]


def _fwd_neg(v, kw):
    return -v[0]


def _vjp_neg(g, out, v, kw):
    return [-g]


def _fwd_exp(v, kw):
    return np.exp(v[0])


def _vjp_exp(g, out, v, kw):
    return [g * out]


def _fwd_log(v, kw):
    if np.any(v[0] <= 0.0):
        raise NumericDomainError("log: nonpositive input")
    return np.log(v[0])


def _vjp_log(g, out, v, kw):
    return [g / v[0]]


def _fwd_log_abs(v, kw):
    if np.any(v[0] == 0.0):
        raise NumericDomainError("log_abs: zero input")
    return np.log(np.abs(v[0]))


def _vjp_log_abs(g, out, v, kw):
    return [g / v[0]]


def _fwd_tanh(v, kw):
    return np.tanh(v[0])


def _vjp_tanh(g, out, v, kw):
    return [g * (1.0 - out * out)]


def _fwd_square(v, kw):
    return v[0] * v[0]


def _vjp_square(g, out, v, kw):
    return [2.0 * g * v[0]]


def _fwd_total(v, kw):
    return np.sum(v[0], axis=kw["axis"])


def _vjp_total(g, out, v, kw):
    a = v[0]
    axis = kw["axis"]
    if axis is None:
        return [np.broadcast_to(g, a.shape)]
    return [np.broadcast_to(np.expand_dims(g, axis), a.shape)]


def _fwd_mean(v, kw):
    return np.mean(v[0], axis=kw["axis"])


def _vjp_mean(g, out, v, kw):
    a = v[0]
    axis = kw["axis"]
    if axis is None:
        return [np.broadcast_to(g / a.size, a.shape)]
    return [np.broadcast_to(np.expand_dims(g / a.shape[axis], axis), a.shape)]


def _fwd_cumsum(v, kw):
    return np.cumsum(v[0], axis=kw["axis"])


def _vjp_cumsum(g, out, v, kw):
    axis = kw["axis"]
    return [np.flip(np.cumsum(np.flip(g, axis), axis), axis)]


def _fwd_concat(v, kw):
    return np.concatenate(v, axis=kw["axis"])


def _vjp_concat(g, out, v, kw):
    axis = kw["axis"]
    sizes = np.cumsum([a.shape[axis] for a in v])[:-1]
    return list(np.split(g, sizes, axis=axis))


def _fwd_getitem(v, kw):
    return v[0][kw["key"]]


def _vjp_getitem(g, out, v, kw):
    buf = np.zeros_like(v[0])
    buf[kw["key"]] += g
    return [buf]


def _fwd_take_last(v, kw):
    return np.take(v[0], kw["idx"], axis=-1)


def _vjp_take_last(g, out, v, kw):
    a = v[0]
    idx = kw["idx"]
    # explicit C order: zeros_like would copy a's layout, and reshape of a
    # non-contiguous buffer returns a copy that the scatter would vanish into
    buf = np.zeros(a.shape, dtype=np.float64)
    flat = buf.reshape(-1, a.shape[-1])
    gf = np.asarray(g).reshape(-1, len(idx))
    rows = np.arange(flat.shape[0])[:, None]
    np.add.at(flat, (rows, idx[None, :]), gf)
    return [buf]


def _fwd_gather_rows(v, kw):
    # table (R, C), idx integer (..., R): out[..., r] = table[r, idx[..., r]]
    table = v[0]
    idx = kw["idx"]
    rows = np.broadcast_to(np.arange(table.shape[0]), idx.shape)
    return table[rows, idx]


def _vjp_gather_rows(g, out, v, kw):
    table = v[0]
    idx = kw["idx"]
    rows = np.broadcast_to(np.arange(table.shape[0]), idx.shape)
    buf = np.zeros_like(table)
    np.add.at(buf, (rows, idx), g)
    return [buf]


def _fwd_where(v, kw):
    return np.where(kw["mask"], v[0], v[1])


def _vjp_where(g, out, v, kw):
    mask = kw["mask"]
    return [
        _unbroadcast(np.where(mask, g, 0.0), v[0].shape),
        _unbroadcast(np.where(mask, 0.0, g), v[1].shape),
    ]


def _fwd_unsqueeze(v, kw):
    return np.expand_dims(v[0], kw["axis"])


def _vjp_unsqueeze(g, out, v, kw):
    return [np.asarray(g).reshape(v[0].shape)]


def _apply_linear(w, x):
    # weight (O, I) applied along axis 1 of x (N, I, ...); tensordot keeps
    # the contraction order fixed, unlike einsum's optimizer
    return np.moveaxis(np.tensordot(w, x, axes=([1], [1])), 0, 1)


def _fwd_linear(v, kw):
    return _apply_linear(v[0], v[1])


def _vjp_linear(g, out, v, kw):
    w, x = v
    shared = [0] + list(range(2, g.ndim))
    gw = np.tensordot(g, x, axes=(shared, shared))
    gx = np.moveaxis(np.tensordot(w, g, axes=([0], [1])), 0, 1)
    return [gw, gx]


_OPS = {
    "add": (_fwd_add, _vjp_add),
    "sub": (_fwd_sub, _vjp_sub),
    "mul": (_fwd_mul, _vjp_mul),
    "div": (_fwd_div, _vjp_div),
    "neg": (_fwd_neg, _vjp_neg),
    "exp": (_fwd_exp, _vjp_exp),
    "log": (_fwd_log, _vjp_log),
    "log_abs": (_fwd_log_abs, _vjp_log_abs),
    "tanh": (_fwd_tanh, _vjp_tanh),
    "square": (_fwd_square, _vjp_square),
    "total": (_fwd_total, _vjp_total),
    "mean": (_fwd_mean, _vjp_mean),
    "cumsum": (_fwd_cumsum, _vjp_cumsum),
    "concat": (_fwd_concat, _vjp_concat),
    "getitem": (_fwd_getitem, _vjp_getitem),
    "take_last": (_fwd_take_last, _vjp_take_last),
    "gather_rows": (_fwd_gather_rows, _vjp_gather_rows),
    "where": (_fwd_where, _vjp_where),
    "unsqueeze": (_fwd_unsqueeze, _vjp_unsqueeze),
    "linear": (_fwd_linear, _vjp_linear),
}


class _Node:
    __slots__ = ("op", "parents", "kw", "value")

    def __init__(self, op, parents, kw, value):
        self.op = op
        self.parents = parents
        self.kw = kw
        self.value = value


class Tensor:
    """Handle to one tape node. Supports numpy-style arithmetic."""

    __slots__ = ("tape", "idx")
    __array_ufunc__ = None  # keep numpy from hijacking ndarray <op> Tensor
    _defer_types = ()  # higher-level wrappers (jets) register here

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __add__(self, other):
        if isinstance(other, self._defer_types):
            return NotImplemented
        return self.tape.apply("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, self._defer_types):
            return NotImplemented
        return self.tape.apply("sub", self, other)

    def __rsub__(self, other):
        return self.tape.apply("sub", other, self)

    def __mul__(self, other):
        if isinstance(other, self._defer_types):
            return NotImplemented
        return self.tape.apply("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, self._defer_types):
            return NotImplemented
        return self.tape.apply("div", self, other)

    def __rtruediv__(self, other):
        return self.tape.apply("div", other, self)

    def __neg__(self):
        return self.tape.apply("neg", self)

    def __getitem__(self, key):
        return self.tape.apply("getitem", self, key=key)

    def __repr__(self):
        return f"Tensor(op={self.tape.nodes[self.idx].op}, shape={self.shape})"


class Tape:
    """Append-only record of primitive operations on tracked arrays."""

    def __init__(self):
        self.nodes = []
        self._leaves = {}

    def _record(self, op, parents, kw, value):
        self.nodes.append(_Node(op, parents, kw, value))
        return Tensor(self, len(self.nodes) - 1)

    def leaf(self, param):
        """Tracked leaf for a Param; one node per param per tape."""
        t = self._leaves.get(id(param))
        if t is None:
            t = self._record("param", (), {"param": param}, param.value)
            self._leaves[id(param)] = t
        return t

    def const(self, value):
        return self._record("const", (), {}, np.asarray(value, dtype=np.float64))

    def _coerce(self, x):
        if isinstance(x, Tensor):
            if x.tape is not self:
                raise ValueError("mixing tensors from different tapes")
            return x
        if isinstance(x, Param):
            return self.leaf(x)
        return self.const(x)

    def apply(self, op, *xs, **kw):
        parents = tuple(self._coerce(x) for x in xs)
        values = [p.value for p in parents]
        out = _OPS[op][0](values, kw)
        return self._record(op, tuple(p.idx for p in parents), kw, out)

    def backward(self, out):
        """Adjoint sweep from a scalar output; returns {Param: gradient}."""
        if not isinstance(out, Tensor) or out.tape is not self:
            raise ValueError("backward requires a tensor recorded on this tape")
        if np.shape(out.value) != ():
            raise ValueError("backward requires a scalar output node")
        grads = [None] * (out.idx + 1)
        grads[out.idx] = np.ones(())
        param_grads = {}
        nodes = self.nodes
        for i in range(out.idx, -1, -1):
            g = grads[i]
            grads[i] = None
            if g is None:
                continue
            node = nodes[i]
            if node.op == "param":
                p = node.kw["param"]
                prev = param_grads.get(p)
                param_grads[p] = np.array(g, dtype=np.float64) if prev is None else prev + g
                continue
            if node.op == "const":
                continue
            values = [nodes[j].value for j in node.parents]
            bars = _OPS[node.op][1](g, node.value, values, node.kw)
            for j, b in zip(node.parents, bars):
                if b is None:
                    continue
                grads[j] = b if grads[j] is None else grads[j] + b
        return param_grads

    def replay(self):
        """Recompute every node from the recorded leaves.

        Returns True when all recomputed payloads match the recorded ones
        bit for bit.
        """
        recomputed = []
        for node in self.nodes:
            if node.op in ("param", "const"):
                recomputed.append(node.value)
            else:
                values = [recomputed[j] for j in node.parents]
                recomputed.append(_OPS[node.op][0](values, node.kw))
        return all(
            np.array_equal(a, b.value, equal_nan=True)
            for a, b in zip(recomputed, self.nodes)
        )


def lift(param, tape):
    """Param as a tracked leaf on ``tape``, or its raw value when tape is None."""
    return param.value if tape is None else tape.leaf(param)


def raw(x):
    """Underlying numpy array of a Tensor, or the input unchanged."""
    return x.value if isinstance(x, Tensor) else x


# ---------------------------------------------------------------------------
# dispatch helpers: same call works on Tensors and bare arrays


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    return None


def exp(x):
    if isinstance(x, Tensor):
        return x.tape.apply("exp", x)
    return np.exp(x)


def log(x):
    if isinstance(x, Tensor):
        return x.tape.apply("log", x)
    return _fwd_log([np.asarray(x, dtype=np.float64)], {})


def log_abs(x):
    if isinstance(x, Tensor):
        return x.tape.apply("log_abs", x)
    return _fwd_log_abs([np.asarray(x, dtype=np.float64)], {})


def tanh(x):
    if isinstance(x, Tensor):
        return x.tape.apply("tanh", x)
    return np.tanh(x)


def square(x):
    if isinstance(x, Tensor):
        return x.tape.apply("square", x)
    return np.asarray(x) * np.asarray(x)


def divide(a, b):
    t = _tape_of(a, b)
    if t is not None:
        return t.apply("div", a, b)
    return _fwd_div([np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)], {})


def where(mask, a, b):
    mask = np.asarray(mask, dtype=bool)
    t = _tape_of(a, b)
    if t is not None:
        return t.apply("where", a, b, mask=mask)
    return np.where(mask, a, b)


def concat(xs, axis=0):
    t = _tape_of(*xs)
    if t is not None:
        return t.apply("concat", *xs, axis=axis)
    return np.concatenate([np.asarray(x, dtype=np.float64) for x in xs], axis=axis)


def take_last(x, idx):
    idx = np.asarray(idx, dtype=np.intp)
    if isinstance(x, Tensor):
        return x.tape.apply("take_last", x, idx=idx)
    return np.take(x, idx, axis=-1)


def gather_rows(table, idx):
    idx = np.asarray(idx, dtype=np.intp)
    if isinstance(table, Tensor):
        return table.tape.apply("gather_rows", table, idx=idx)
    rows = np.broadcast_to(np.arange(table.shape[0]), idx.shape)
    return table[rows, idx]


def cumsum(x, axis):
    if isinstance(x, Tensor):
        return x.tape.apply("cumsum", x, axis=axis)
    return np.cumsum(x, axis=axis)


def unsqueeze(x, axis):
    if isinstance(x, Tensor):
        return x.tape.apply("unsqueeze", x, axis=axis)
    return np.expand_dims(x, axis)


def linear_map(w, x):
    """Apply a (out, in) weight along axis 1 of x with shape (n, in, ...)."""
    t = _tape_of(w, x)
    if t is not None:
        return t.apply("linear", w, x)
    return _apply_linear(np.asarray(w, dtype=np.float64), np.asarray(x, dtype=np.float64))


def total(x, axis=None):
    if isinstance(x, Tensor):
        return x.tape.apply("total", x, axis=axis)
    return np.sum(x, axis=axis)


def mean(x, axis=None):
    if isinstance(x, Tensor):
        return x.tape.apply("mean", x, axis=axis)
    return np.mean(x, axis=axis)
