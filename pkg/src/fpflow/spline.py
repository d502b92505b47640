"""Monotone per-dimension spline map used as an optional last flow layer.

The map is built from a piecewise-linear probability density on [0,1] with
``bins`` uniform cells. Integrating it gives a piecewise-quadratic CDF; the
layer rescales that CDF onto (-c, c) and continues with slope ``tail_slope``
straight lines outside, so the map is strictly increasing on all of R and
has a closed-form inverse (one quadratic root per cell).

Knot densities: the two endpoint knots are pinned to ``tail_slope``; the
interior knots are exp(raw)/sum(exp(raw')) where the two pinned knots
contribute exp(0)=1 each to the denominator only. The resulting density
does not integrate to exactly 1, so the CDF is divided by its total mass,
making the (-c, c) -> (-c, c) part exact.
"""

from __future__ import annotations

import numpy as np

from . import tape as T
from .jets import Jet2, jlog, jsquare, jsum, jwhere

__all__ = ["SplineLayer"]


class SplineLayer:
    kind = "spline"

    def __init__(self, d, bins=32, tail_slope=1e-6, half_range=5.0):
        if bins < 2:
            raise ValueError("need at least 2 bins")
        if tail_slope <= 0:
            raise ValueError("tail_slope must be positive")
        self.d = d
        self.bins = int(bins)
        self.tail_slope = float(tail_slope)
        self.half_range = float(half_range)
        # interior knot logits; the two boundary knots are fixed constants
        self.weights_raw = T.Param(np.zeros((d, bins - 1)), name="spline.weights_raw")

    def params(self):
        return [self.weights_raw]

    def _tables(self, tape):
        """Knot densities (d, bins+1), prefixed cumulative mass (d, bins+1),
        and total mass (d,). Works on raw arrays and on tracked tensors."""
        kt = T.lift(self.weights_raw, tape)
        m = self.bins
        e = T.exp(kt)
        denom = 2.0 + T.total(e, axis=1)  # the two pinned knots contribute exp(0)
        interior = T.divide(e, T.unsqueeze(denom, 1))
        edge = np.full((self.d, 1), self.tail_slope)
        k = T.concat([edge, interior, edge], axis=1)
        mass = (k[:, :-1] + k[:, 1:]) * (0.5 / m)
        cum0 = T.concat([np.zeros((self.d, 1)), T.cumsum(mass, axis=1)], axis=1)
        total = cum0[:, -1]
        return k, cum0, total

    def forward_jet(self, xj, tj, tape):
        m = self.bins
        c = self.half_range
        gamma = self.tail_slope
        xv = T.raw(xj.value)
        k, cum0, total = self._tables(tape)

        u = xj * (0.5 / c) + 0.5
        uv = T.raw(u.value)
        cell = np.clip(np.floor(uv * m).astype(np.intp), 0, m - 1)
        k_lo = Jet2.const(T.gather_rows(k, cell), xj.spec)
        k_hi = Jet2.const(T.gather_rows(k, cell + 1), xj.spec)
        below = Jet2.const(T.gather_rows(cum0, cell), xj.spec)
        du = u - cell / m

        dens = k_lo + (k_hi - k_lo) * du * m
        cdf = below + k_lo * du + (k_hi - k_lo) * (0.5 * m) * jsquare(du)

        inside = np.abs(xv) <= c
        y_in = (cdf / total) * (2.0 * c) - c
        tail_shift = (1.0 - gamma) * c * np.sign(xv)
        y_out = xj * gamma + tail_shift
        yj = jwhere(inside, y_in, y_out)

        # slope inside is dens/total; the un-selected branch is clamped to 1
        # before the log so out-of-range extrapolated densities never reach it
        ld_in = jlog(jwhere(inside, dens, 1.0)) - T.log(total)
        ld_dim = jwhere(inside, ld_in, np.log(gamma))
        return yj, jsum(ld_dim, 1)

    def inverse(self, y, t):
        m = self.bins
        c = self.half_range
        gamma = self.tail_slope
        y = np.asarray(y, dtype=np.float64)
        k, cum0, total = self._tables(None)
        x = np.empty_like(y)
        for dim in range(self.d):
            col = y[:, dim]
            inside = np.abs(col) <= c
            out = np.where(col > 0, (col - c) / gamma + c, (col + c) / gamma - c)
            # clip keeps the quadratic-root math clean for tail points, whose
            # result is discarded by the final where anyway
            target = np.clip((col + c) * (0.5 / c), 0.0, 1.0) * total[dim]
            j = np.clip(np.searchsorted(cum0[dim], target, side="right") - 1, 0, m - 1)
            rem = target - cum0[dim, j]
            k_lo = k[dim, j]
            half_dk = (k[dim, j + 1] - k_lo) * (0.5 * m)
            # smaller root of half_dk*delta^2 + k_lo*delta = rem, written in the
            # cancellation-free form (exact linear solution when half_dk == 0)
            delta = 2.0 * rem / (k_lo + np.sqrt(k_lo**2 + 4.0 * half_dk * rem))
            x[:, dim] = np.where(inside, (j / m + delta) * 2.0 * c - c, out)
        return x

    def to_dict(self):
        return {
            "kind": self.kind,
            "bins": self.bins,
            "tail_slope": self.tail_slope,
            "half_range": self.half_range,
            "weights_raw": self.weights_raw.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d_spatial, rec):
        layer = cls(
            d_spatial,
            bins=rec["bins"],
            tail_slope=rec["tail_slope"],
            half_range=rec["half_range"],
        )
        layer.weights_raw.value = np.array(rec["weights_raw"], dtype=np.float64)
        return layer
