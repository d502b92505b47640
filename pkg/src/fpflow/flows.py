"""Time-conditioned normalizing flow: model density p(x, t) on R^d.

The latent time coordinate equals t identically, so the Jacobian of the
map (x, t) -> (z, t) is block triangular and only the spatial block enters
the log-determinant. The spatial prior is a standard normal independent
of t. Density and all its tracked derivatives come out of one jet-valued
forward pass plus the closed-form log-determinants.

Layer stack: [actnorm, coupling] pairs with coupling parity alternating,
optionally ending in a monotone spline layer. With conditioner output
layers, coupling shift amplitudes, actnorm, and spline all zero/one
initialized, the whole flow is exactly the identity map.
"""

from __future__ import annotations

import json
import warnings

import numpy as np

from . import tape as T
from .jets import (
    Jet2,
    JetSpec,
    jconcat,
    jexp,
    jlinear,
    jlog,
    jsquare,
    jsum,
    jtanh,
    junsqueeze,
    seed_spatial,
    seed_time,
)
from .spline import SplineLayer

__all__ = ["ActnormLayer", "CouplingLayer", "TemporalFlow", "FlowEvalError", "build_flow"]

LOG_2PI = float(np.log(2.0 * np.pi))
SCALE_FLOOR = 1e-8


class FlowEvalError(RuntimeError):
    """A layer produced non-finite values during evaluation."""


class ActnormLayer:
    """Per-dimension affine map y = a*x + b on the spatial coordinates."""

    kind = "actnorm"

    def __init__(self, d):
        self.d = d
        self.scale = T.Param(np.ones(d), name="actnorm.scale")
        self.bias = T.Param(np.zeros(d), name="actnorm.bias")
        self.initialized = False

    def params(self):
        return [self.scale, self.bias]

    def init_from(self, x):
        """Data-dependent init: post-layer batch gets mean 0, variance 1."""
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        degenerate = std < 1e-12
        if degenerate.any():
            warnings.warn(
                f"zero-variance dimensions {np.flatnonzero(degenerate).tolist()} "
                "during data-dependent init; leaving their scale at 1"
            )
        a = np.where(degenerate, 1.0, 1.0 / np.where(degenerate, 1.0, std))
        a = np.where(np.abs(a) < SCALE_FLOOR, SCALE_FLOOR, a)
        self.scale.value = a
        self.bias.value = -x.mean(axis=0) * a
        self.initialized = True

    def clamp(self):
        a = self.scale.value
        small = np.abs(a) < SCALE_FLOOR
        if small.any():
            self.scale.value = np.where(small, np.where(a < 0, -SCALE_FLOOR, SCALE_FLOOR), a)

    def forward_jet(self, xj, tj, tape):
        a = T.lift(self.scale, tape)
        b = T.lift(self.bias, tape)
        return xj * a + b, T.total(T.log_abs(a))

    def inverse(self, y, t):
        return (y - self.bias.value) / self.scale.value


class Conditioner:
    """MLP from (pass-through coordinates, t) to coupling pre-activations.

    Two tanh hidden layers; the output layer starts at zero so the coupling
    layer is the identity until training moves it.
    """

    def __init__(self, n_in, n_out, hidden, rng):
        def glorot(n_o, n_i):
            lim = np.sqrt(6.0 / (n_i + n_o))
            return rng.uniform(-lim, lim, size=(n_o, n_i))

        self.w1 = T.Param(glorot(hidden, n_in), name="cond.w1")
        self.b1 = T.Param(np.zeros(hidden), name="cond.b1")
        self.w2 = T.Param(glorot(hidden, hidden), name="cond.w2")
        self.b2 = T.Param(np.zeros(hidden), name="cond.b2")
        self.w3 = T.Param(np.zeros((n_out, hidden)), name="cond.w3")
        self.b3 = T.Param(np.zeros(n_out), name="cond.b3")

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def forward_jet(self, inp, tape):
        h = jtanh(jlinear(T.lift(self.w1, tape), inp, bias=T.lift(self.b1, tape)))
        h = jtanh(jlinear(T.lift(self.w2, tape), h, bias=T.lift(self.b2, tape)))
        return jlinear(T.lift(self.w3, tape), h, bias=T.lift(self.b3, tape))

    def values(self, inp):
        h = np.tanh(inp @ self.w1.value.T + self.b1.value)
        h = np.tanh(h @ self.w2.value.T + self.b2.value)
        return h @ self.w3.value.T + self.b3.value


class CouplingLayer:
    """Affine coupling conditioned on the untouched half and on t.

    The transformed half is scaled by 1 + scale_bound*tanh(s), which stays
    inside (1-|scale_bound|, 1+|scale_bound|) and hence strictly positive,
    and shifted by exp(shift_log_amp)*tanh(q).
    """

    kind = "coupling"

    def __init__(self, d, parity, hidden=32, scale_bound=0.6, rng=None):
        if not abs(scale_bound) < 1.0:
            raise ValueError("|scale_bound| must be < 1 for invertibility")
        if d == 1:
            parity = 0  # single coordinate: conditioner sees t only
        self.d = d
        self.parity = int(parity)
        self.hidden = hidden
        self.scale_bound = float(scale_bound)
        m = d // 2
        self.n_pass = m if self.parity == 0 else d - m
        self.n_trans = d - self.n_pass
        rng = rng if rng is not None else np.random.default_rng()
        self.net = Conditioner(self.n_pass + 1, 2 * self.n_trans, hidden, rng)
        self.shift_log_amp = T.Param(np.zeros(self.n_trans), name="coupling.shift_log_amp")

    def params(self):
        return self.net.params() + [self.shift_log_amp]

    def _split(self, x):
        if self.parity == 0:
            return x[:, : self.n_pass], x[:, self.n_pass :]
        return x[:, self.n_trans :], x[:, : self.n_trans]

    def _join_parts(self, kept, transformed, cat):
        if self.parity == 0:
            return cat([kept, transformed], 1)
        return cat([transformed, kept], 1)

    def forward_jet(self, xj, tj, tape):
        kept, trans = self._split(xj)
        inp = jconcat([kept, junsqueeze(tj, 1)], axis=1)
        out = self.net.forward_jet(inp, tape)
        s = out[:, : self.n_trans]
        q = out[:, self.n_trans :]
        scale = 1.0 + self.scale_bound * jtanh(s)
        amp = T.exp(T.lift(self.shift_log_amp, tape))
        y_trans = trans * scale + amp * jtanh(q)
        yj = self._join_parts(kept, y_trans, jconcat)
        return yj, jsum(jlog(scale), 1)

    def inverse(self, y, t):
        if self.parity == 0:
            kept, y_trans = y[:, : self.n_pass], y[:, self.n_pass :]
        else:
            kept, y_trans = y[:, self.n_trans :], y[:, : self.n_trans]
        out = self.net.values(np.concatenate([kept, t[:, None]], axis=1))
        s = out[:, : self.n_trans]
        q = out[:, self.n_trans :]
        scale = 1.0 + self.scale_bound * np.tanh(s)
        shift = np.exp(self.shift_log_amp.value) * np.tanh(q)
        x_trans = (y_trans - shift) / scale
        return self._join_parts(kept, x_trans, lambda parts, ax: np.concatenate(parts, axis=ax))


class TemporalFlow:
    """Ordered invertible layers plus a standard-normal spatial prior."""

    def __init__(self, d, layers, hidden=32, scale_bound=0.6, tail_slope=1e-6,
                 spline_range=5.0, bins=32):
        self.d = d
        self.layers = layers
        self.hidden = hidden
        self.scale_bound = scale_bound
        self.tail_slope = tail_slope
        self.spline_range = spline_range
        self.bins = bins

    # -- evaluation -----------------------------------------------------

    def forward_jet(self, x, t, tape=None, spec=None):
        """Map points to latent space. Returns (z jet (n,d), logdet jet (n,))."""
        x = np.asarray(x, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        if spec is None:
            spec = JetSpec.values_only(self.d)
        xj = seed_spatial(x, spec)
        tj = seed_time(t, spec)
        ld = Jet2.const(np.zeros(x.shape[0]), spec)
        for i, layer in enumerate(self.layers):
            xj, contrib = layer.forward_jet(xj, tj, tape)
            if contrib is not None:
                ld = ld + contrib
            if not np.all(np.isfinite(T.raw(xj.value))):
                raise FlowEvalError(f"layer {i} ({layer.kind}) produced non-finite values")
        return xj, ld

    def log_density_jet(self, x, t, tape=None, spec=None):
        zj, ld = self.forward_jet(x, t, tape=tape, spec=spec)
        return ld - 0.5 * jsum(jsquare(zj), 1) - 0.5 * self.d * LOG_2PI

    def density_jet(self, x, t, tape=None, spec=None):
        return jexp(self.log_density_jet(x, t, tape=tape, spec=spec))

    def log_density(self, x, t):
        """Plain numpy log p(x, t), no derivative tracking."""
        return T.raw(self.log_density_jet(x, t).value)

    def inverse(self, z, t):
        z = np.asarray(z, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (z.shape[0],))
        x = z
        for layer in reversed(self.layers):
            x = layer.inverse(x, t)
        return x

    def sample(self, t, n, rng):
        """n draws from p(., t) by pushing prior samples through the inverse."""
        z = rng.standard_normal((n, self.d))
        return self.inverse(z, t)

    # -- parameters -----------------------------------------------------

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def init_actnorm(self, x, t):
        """Data-dependent init of every uninitialized actnorm layer, each one
        seeing the batch as transformed by the layers before it."""
        x = np.asarray(x, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        spec = JetSpec.values_only(self.d)
        xj = seed_spatial(x, spec)
        tj = seed_time(t, spec)
        for layer in self.layers:
            if isinstance(layer, ActnormLayer) and not layer.initialized:
                layer.init_from(xj.value)
            xj, _ = layer.forward_jet(xj, tj, None)

    def clamp_parameters(self):
        for layer in self.layers:
            if isinstance(layer, ActnormLayer):
                layer.clamp()

    # -- persistence ------------------------------------------------------

    def to_dict(self, extra=None):
        layers = []
        for layer in self.layers:
            if isinstance(layer, ActnormLayer):
                layers.append({
                    "kind": "actnorm",
                    "initialized": layer.initialized,
                    "scale": layer.scale.value.tolist(),
                    "bias": layer.bias.value.tolist(),
                })
            elif isinstance(layer, CouplingLayer):
                layers.append({
                    "kind": "coupling",
                    "parity": layer.parity,
                    "shift_log_amp": layer.shift_log_amp.value.tolist(),
                    "net": [p.value.tolist() for p in layer.net.params()],
                })
            elif isinstance(layer, SplineLayer):
                layers.append(layer.to_dict())
            else:
                raise TypeError(f"unknown layer {layer!r}")
        doc = {
            "format_version": 1,
            "d": self.d,
            "hidden": self.hidden,
            "scale_bound": self.scale_bound,
            "tail_slope": self.tail_slope,
            "spline_range": self.spline_range,
            "bins": self.bins,
            "layers": layers,
        }
        if extra:
            doc.update(extra)
        return doc

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format_version") != 1:
            raise ValueError(f"unsupported checkpoint format: {doc.get('format_version')!r}")
        d = doc["d"]
        layers = []
        for rec in doc["layers"]:
            if rec["kind"] == "actnorm":
                layer = ActnormLayer(d)
                layer.scale.value = np.array(rec["scale"], dtype=np.float64)
                layer.bias.value = np.array(rec["bias"], dtype=np.float64)
                layer.initialized = rec["initialized"]
            elif rec["kind"] == "coupling":
                layer = CouplingLayer(
                    d, rec["parity"], hidden=doc["hidden"],
                    scale_bound=doc["scale_bound"], rng=np.random.default_rng(0),
                )
                for p, vals in zip(layer.net.params(), rec["net"]):
                    p.value = np.array(vals, dtype=np.float64)
                layer.shift_log_amp.value = np.array(rec["shift_log_amp"], dtype=np.float64)
            elif rec["kind"] == "spline":
                layer = SplineLayer.from_dict(d, rec)
            else:
                raise ValueError(f"unknown layer kind {rec['kind']!r}")
            layers.append(layer)
        return cls(
            d, layers, hidden=doc["hidden"], scale_bound=doc["scale_bound"],
            tail_slope=doc["tail_slope"], spline_range=doc["spline_range"],
            bins=doc["bins"],
        )

    def save(self, path, extra=None):
        with open(path, "w") as f:
            json.dump(self.to_dict(extra=extra), f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def build_flow(d, depth, hidden=32, scale_bound=0.6, tail_slope=1e-6,
               spline=False, spline_range=5.0, bins=32, rng=None):
    """Standard stack: depth [actnorm, coupling] pairs, optional spline tail."""
    rng = rng if rng is not None else np.random.default_rng()
    layers = []
    for i in range(depth):
        layers.append(ActnormLayer(d))
        layers.append(CouplingLayer(d, i % 2, hidden=hidden, scale_bound=scale_bound, rng=rng))
    if spline:
        layers.append(SplineLayer(d, bins=bins, tail_slope=tail_slope, half_range=spline_range))
    return TemporalFlow(
        d, layers, hidden=hidden, scale_bound=scale_bound,
        tail_slope=tail_slope, spline_range=spline_range, bins=bins,
    )
