"""Built-in Fokker-Planck problem definitions.

Each problem packages the operator coefficients (drift, analytic drift
divergence, constant diffusion matrix), the initial density with a seeded
sampler, the time horizon, the box used for the first collocation set, a
wider reference box for evaluation grids, and, where available, the exact
solution in three forms: plain evaluation, jet evaluation (so the residual
operator can be applied to it directly), and a sampler.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .jets import Jet2, JetSpec, jexp, jlog, jsquare, jsum, junsqueeze, seed_spatial, seed_time

__all__ = ["Box", "FokkerPlanckProblem", "builtin", "PROBLEM_NAMES"]

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))
        if self.lo.shape != self.hi.shape or np.any(self.lo >= self.hi):
            raise ValueError("box needs lo < hi per dimension")

    @property
    def d(self):
        return len(self.lo)

    def sample(self, n, rng):
        return rng.uniform(self.lo, self.hi, size=(n, self.d))

    @classmethod
    def cube(cls, d, lo, hi):
        return cls(np.full(d, float(lo)), np.full(d, float(hi)))


@dataclass
class FokkerPlanckProblem:
    name: str
    d: int
    drift: Callable
    drift_div: Callable
    diffusion: np.ndarray
    p0: Callable
    p0_sampler: Callable
    horizon: float
    init_box: Box
    ref_box: Box
    exact: Optional[Callable] = None
    exact_jet: Optional[Callable] = None
    exact_sampler: Optional[Callable] = None
    eval_slice: Optional[np.ndarray] = field(default=None)  # fixed coords for d>2 plots, nan = free
    grid_box: Optional[Box] = None  # finite-difference domain when ref_box clips p0 too hard

    def __post_init__(self):
        D = np.asarray(self.diffusion, dtype=np.float64)
        if D.shape != (self.d, self.d):
            raise ValueError("diffusion must be d x d")
        if not np.allclose(D, D.T):
            raise ValueError("diffusion must be symmetric")
        if np.any(np.diag(D) < 0):
            raise ValueError("diffusion diagonal must be nonnegative")
        self.diffusion = D


def _iso_gaussian_density(mean, var):
    mean = np.asarray(mean, dtype=np.float64)
    d = len(mean)
    lognorm = -0.5 * d * np.log(2.0 * np.pi * var)

    def dens(x):
        q = ((np.asarray(x) - mean) ** 2).sum(axis=1) / (2.0 * var)
        return np.exp(lognorm - q)

    return dens


def _iso_gaussian_sampler(mean, var):
    mean = np.asarray(mean, dtype=np.float64)
    std = np.sqrt(var)

    def draw(n, rng):
        return mean + std * rng.standard_normal((n, len(mean)))

    return draw


def _spreading_gaussian(d, mean0, vel):
    """Exact solution family: mean mean0 + vel*t, covariance (t+1)*I."""
    mean0 = np.asarray(mean0, dtype=np.float64)
    vel = np.asarray(vel, dtype=np.float64)

    def exact(x, t):
        x = np.asarray(x, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        var = t + 1.0
        q = ((x - mean0 - vel * t[:, None]) ** 2).sum(axis=1) / (2.0 * var)
        return np.exp(-q - 0.5 * d * (LOG_2PI + np.log(var)))

    def exact_jet(x, t, spec):
        x = np.asarray(x, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        xj = seed_spatial(x, spec)
        tj = seed_time(t, spec)
        var = tj + 1.0
        center = mean0 + vel * junsqueeze(tj, 1)
        q = jsum(jsquare(xj - center), 1) / (var * 2.0)
        logp = -q - (0.5 * d) * (jlog(var) + LOG_2PI)
        return jexp(logp)

    def exact_sampler(t, n, rng):
        std = np.sqrt(float(t) + 1.0)
        return mean0 + vel * float(t) + std * rng.standard_normal((n, d))

    return exact, exact_jet, exact_sampler


def _toy2d():
    d = 2
    exact, exact_jet, exact_sampler = _spreading_gaussian(d, [4.0, 4.0], [0.0, 0.0])

    def drift(x, t):
        return np.zeros_like(np.asarray(x, dtype=np.float64))

    def drift_div(x, t):
        return np.zeros(len(x))

    return FokkerPlanckProblem(
        name="toy2d",
        d=d,
        drift=drift,
        drift_div=drift_div,
        diffusion=0.5 * np.eye(d),
        p0=_iso_gaussian_density([4.0, 4.0], 1.0),
        p0_sampler=_iso_gaussian_sampler([4.0, 4.0], 1.0),
        horizon=1.0,
        init_box=Box.cube(d, -3.0, 3.0),
        ref_box=Box.cube(d, -3.0, 11.0),
        exact=exact,
        exact_jet=exact_jet,
        exact_sampler=exact_sampler,
    )


def _linear_osc():
    d = 2

    def drift(x, t):
        x = np.asarray(x, dtype=np.float64)
        return np.stack([x[:, 1], -0.2 * x[:, 1] - x[:, 0]], axis=1)

    def drift_div(x, t):
        return np.full(len(x), -0.2)

    return FokkerPlanckProblem(
        name="linear_osc",
        d=d,
        drift=drift,
        drift_div=drift_div,
        diffusion=np.diag([0.0, 0.2]),
        p0=_iso_gaussian_density([1.0, 1.0], 1.0 / 9.0),
        p0_sampler=_iso_gaussian_sampler([1.0, 1.0], 1.0 / 9.0),
        horizon=3.0,
        init_box=Box.cube(d, -5.0, 5.0),
        ref_box=Box.cube(d, -5.0, 5.0),
    )


def _nonlinear_osc():
    d = 2

    def drift(x, t):
        x = np.asarray(x, dtype=np.float64)
        return np.stack(
            [x[:, 1], x[:, 0] - 0.4 * x[:, 1] - 0.1 * x[:, 0] ** 3], axis=1
        )

    def drift_div(x, t):
        return np.full(len(x), -0.4)

    return FokkerPlanckProblem(
        name="nonlinear_osc",
        d=d,
        drift=drift,
        drift_div=drift_div,
        diffusion=np.diag([0.0, 0.4]),
        p0=_iso_gaussian_density([0.0, 5.0], 1.0),
        p0_sampler=_iso_gaussian_sampler([0.0, 5.0], 1.0),
        horizon=3.0,
        init_box=Box.cube(d, -10.0, 10.0),
        ref_box=Box.cube(d, -10.0, 10.0),
        grid_box=Box([-10.0, -10.0], [10.0, 12.0]),
    )


def _advdiff(d):
    exact, exact_jet, exact_sampler = _spreading_gaussian(d, np.zeros(d), 2.0 * np.ones(d))

    def drift(x, t):
        return np.full((len(x), d), 2.0)

    def drift_div(x, t):
        return np.zeros(len(x))

    if d == 4:
        # held coordinates for 2D evaluation slices; nan marks the free plane
        sl = np.array([0.1, np.nan, np.nan, 0.5])
        lo, hi = -3.0, 3.0
    else:
        sl = np.array([np.nan] + [0.4] * (d - 2) + [np.nan])
        lo, hi = -5.0, 5.0

    return FokkerPlanckProblem(
        name=f"advdiff_{d}d",
        d=d,
        drift=drift,
        drift_div=drift_div,
        diffusion=0.5 * np.eye(d),
        p0=_iso_gaussian_density(np.zeros(d), 1.0),
        p0_sampler=_iso_gaussian_sampler(np.zeros(d), 1.0),
        horizon=1.0,
        init_box=Box.cube(d, lo, hi),
        ref_box=Box.cube(d, -4.0, 7.0),
        exact=exact,
        exact_jet=exact_jet,
        exact_sampler=exact_sampler,
        eval_slice=sl,
    )


PROBLEM_NAMES = ("toy2d", "linear_osc", "nonlinear_osc", "advdiff_nd")


def builtin(name, dim=None):
    """Look up a built-in problem; dim is required only for advdiff_nd."""
    if name == "toy2d":
        return _toy2d()
    if name == "linear_osc":
        return _linear_osc()
    if name == "nonlinear_osc":
        return _nonlinear_osc()
    if name == "advdiff_nd":
        if dim is None:
            raise ValueError("advdiff_nd requires a dimension")
        return _advdiff(int(dim))
    raise ValueError(f"unknown problem {name!r}; choose from {PROBLEM_NAMES}")
