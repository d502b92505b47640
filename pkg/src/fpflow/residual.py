"""Fokker-Planck residual operator and the training loss built on it.

The residual of a density p(x, t) under drift mu and constant diffusion D is

    r = dp/dt + div(mu) p + mu . grad p - sum_ij D_ij d2p/dx_i dx_j.

All derivatives come from one jet evaluation of the density, with the
second-derivative pairs restricted to the nonzero entries of D.  The same
operator runs on a trained flow or on a problem's closed-form solution, which
is how the operator itself gets tested.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .jets import JetSpec, component

__all__ = [
    "LossWeights",
    "NonFiniteLossError",
    "diffusion_jet_spec",
    "residual_values",
    "exact_density_provider",
    "pde_loss",
]


class NonFiniteLossError(RuntimeError):
    """Raised when the training loss evaluates to nan or inf."""


@dataclass(frozen=True)
class LossWeights:
    residual: float = 1.0
    init_cond: float = 1.0

    def __post_init__(self):
        r, c = float(self.residual), float(self.init_cond)
        if not (np.isfinite(r) and np.isfinite(c)):
            raise ValueError("loss weights must be finite")
        if r < 0 or c < 0:
            raise ValueError("loss weights must be nonnegative")
        if r == 0 and c == 0:
            raise ValueError("at least one loss weight must be positive")


def diffusion_jet_spec(problem):
    """Jet spec tracking only the second derivatives the diffusion term needs.

    Returns (spec, coefs) where coefs[k] multiplies packed entry k of the
    Hessian: D_ii on the diagonal, 2 D_ij for i < j (the matrix is symmetric,
    so both off-diagonal entries fold into one tracked pair).
    """
    D = problem.diffusion
    d = problem.d
    pairs = []
    coefs = []
    for i in range(d):
        for j in range(i, d):
            if D[i, j] != 0.0:
                pairs.append((i, j))
                coefs.append(D[i, i] if i == j else 2.0 * D[i, j])
    spec = JetSpec(d, tuple(pairs), first_order=True)
    return spec, np.asarray(coefs, dtype=np.float64)


def residual_values(density_jet, problem, x, t, tape=None):
    """Evaluate the residual at collocation points.

    density_jet is called as density_jet(x, t, tape, spec) and must return a
    Jet2 of the density; the flow's density_jet method and the adapter from
    exact_density_provider both fit.  Returns an (n,) tensor when a tape is
    given, otherwise a plain array.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    spec, coefs = diffusion_jet_spec(problem)
    jet = density_jet(x, t, tape, spec)

    mu = problem.drift(x, t)
    div = problem.drift_div(x, t)

    r = component(jet.g, spec.time_index) + div * jet.value
    r = r + T.total(mu * jet.g[:, : problem.d], axis=1)
    if spec.P:
        r = r - T.total(coefs * jet.h, axis=1)
    return r


def exact_density_provider(problem):
    if problem.exact_jet is None:
        raise ValueError(f"problem {problem.name!r} has no closed-form solution")
    return lambda x, t, tape, spec: problem.exact_jet(x, t, spec)


def pde_loss(flow, problem, res_points=None, ic_points=None, weights=None, tape=None):
    """Residual + initial-condition loss over one minibatch.

    res_points is an (x, t) pair, ic_points an array of x at t = 0; either may
    be None or empty (mixed minibatches routinely contain only one kind), but
    not both.  Returns (tape, loss, parts) with parts holding the plain float
    value of each mean-square term.
    """
    weights = weights or LossWeights()
    have_res = res_points is not None and len(res_points[0]) > 0
    have_ic = ic_points is not None and len(ic_points) > 0
    if not have_res and not have_ic:
        raise ValueError("loss needs at least one residual or initial point")
    if tape is None:
        tape = T.Tape()

    loss = None
    parts = {"residual": 0.0, "init_cond": 0.0}
    if have_res:
        xr, tr = res_points
        r = residual_values(flow.density_jet, problem, xr, tr, tape)
        term = T.mean(T.square(r))
        parts["residual"] = float(T.raw(term))
        loss = weights.residual * term
    if have_ic:
        x0 = np.asarray(ic_points, dtype=np.float64)
        pred = flow.density_jet(x0, np.zeros(len(x0)), tape).value
        term = T.mean(T.square(pred - problem.p0(x0)))
        parts["init_cond"] = float(T.raw(term))
        contrib = weights.init_cond * term
        loss = contrib if loss is None else loss + contrib

    if not np.isfinite(T.raw(loss)):
        raise NonFiniteLossError(
            "loss is non-finite (residual part %r, initial part %r, "
            "%d residual points, %d initial points)"
            % (
                parts["residual"],
                parts["init_cond"],
                len(res_points[0]) if have_res else 0,
                len(ic_points) if have_ic else 0,
            )
        )
    return tape, loss, parts
