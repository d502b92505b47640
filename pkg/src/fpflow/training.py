"""Adaptive training loop: Adam on the PDE loss with model-driven resampling.

The outer loop alternates between minibatch training on the current
collocation set and redrawing the spatial coordinates of every collocation
point from the model itself, holding the time grid fixed.  The epoch budget
grows geometrically across rounds.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tape as T
from .flows import FlowEvalError
from .residual import LossWeights, NonFiniteLossError, pde_loss

__all__ = [
    "TimeGridSpec",
    "CountSchedule",
    "TrainConfig",
    "TrainingSet",
    "TrainHooks",
    "TrainResult",
    "Adam",
    "uniform_time_partition",
    "nonuniform_time_partition",
    "spatial_count_schedule",
    "init_training_set",
    "resample_training_set",
    "train_adaptive",
    "write_train_log",
    "LOG_COLUMNS",
]

LOG_COLUMNS = ("round", "epoch", "loss", "loss_residual", "loss_init", "wall_time")


def uniform_time_partition(horizon, n):
    if n < 1:
        raise ValueError("need at least one time node")
    return np.linspace(0.0, float(horizon), int(n))


def nonuniform_time_partition(ratio, n, horizon=1.0):
    """Geometric time partition clustering nodes toward the horizon.

    t_i = T * (1 - (ratio^(n-i) + 1) / (ratio^n + 1)) for i = 1..n; lies in
    (0, T), strictly increasing.  ratio <= 1 is rejected: the formula
    degenerates to all zeros at ratio = 1 and reverses below it.
    """
    ratio = float(ratio)
    n = int(n)
    if n < 1:
        raise ValueError("need at least one time node")
    if ratio <= 1.0:
        raise ValueError("ratio must exceed 1 (the partition degenerates otherwise)")
    i = np.arange(1, n + 1)
    try:
        rn = ratio**n
    except OverflowError:
        rn = float("inf")
    if np.isfinite(rn):
        t = 1.0 - (ratio ** (n - i).astype(np.float64) + 1.0) / (rn + 1.0)
    else:
        # log-space fallback: log(r^k + 1) = k log r + log1p(r^-k)
        logr = np.log(ratio)
        k = (n - i).astype(np.float64)
        log_num = k * logr + np.log1p(ratio ** (-k))
        log_den = n * logr + np.log1p(ratio ** (-float(n)))
        t = 1.0 - np.exp(log_num - log_den)
    return float(horizon) * t


def spatial_count_schedule(base, i, period=20):
    """Per-time-node point count, stepping up every `period` nodes (i is 1-based)."""
    if i < 1:
        raise ValueError("time index is 1-based")
    return int(base) * (1 + (int(i) - 1) // int(period))


@dataclass(frozen=True)
class TimeGridSpec:
    kind: str = "uniform"  # uniform | nonuniform | piecewise
    n: int = 0
    ratio: float = 0.0
    segments: tuple = ()  # ((t_lo, t_hi, nodes), ...) for piecewise

    def __post_init__(self):
        if self.kind not in ("uniform", "nonuniform", "piecewise"):
            raise ValueError(f"unknown time grid kind {self.kind!r}")
        if self.kind in ("uniform", "nonuniform") and self.n < 1:
            raise ValueError("time grid needs n >= 1")
        if self.kind == "piecewise" and not self.segments:
            raise ValueError("piecewise grid needs segments")

    def build(self, horizon):
        if self.kind == "uniform":
            return uniform_time_partition(horizon, self.n)
        if self.kind == "nonuniform":
            return nonuniform_time_partition(self.ratio, self.n, horizon)
        parts = []
        for lo, hi, k in self.segments:
            if not (0.0 <= lo < hi <= horizon + 1e-12):
                raise ValueError(f"segment [{lo}, {hi}] outside [0, {horizon}]")
            if k < 2:
                raise ValueError("each segment needs at least 2 nodes")
            parts.append(np.linspace(float(lo), float(hi), int(k)))
        return np.unique(np.concatenate(parts))


@dataclass(frozen=True)
class CountSchedule:
    kind: str = "constant"  # constant | staircase
    base: int = 1000
    period: int = 20

    def __post_init__(self):
        if self.kind not in ("constant", "staircase"):
            raise ValueError(f"unknown count schedule kind {self.kind!r}")
        if self.base < 1 or self.period < 1:
            raise ValueError("count schedule needs base >= 1 and period >= 1")

    def counts(self, n_times):
        if self.kind == "constant":
            return np.full(n_times, self.base, dtype=np.int64)
        i = np.arange(1, n_times + 1)
        return self.base * (1 + (i - 1) // self.period)


@dataclass
class TrainConfig:
    epochs: int = 20  # initial per-round epoch cap; grows by epoch_growth each round
    epoch_growth: float = 2.0
    rounds: int = 5
    batch: int = 1000
    lr: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    eps_loss: float = 1e-5  # stop a round when the epoch loss falls below this
    eps_delta: float = 1e-7  # or when successive epoch losses differ by less
    seed: int = 0
    time_grid: TimeGridSpec = field(default_factory=lambda: TimeGridSpec("uniform", n=20))
    counts: CountSchedule = field(default_factory=CountSchedule)
    n_ic: int = 1000

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.epoch_growth < 1.0:
            raise ValueError("epoch_growth must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (self.eps_loss > self.eps_delta >= 0):
            raise ValueError("need eps_loss > eps_delta >= 0")
        if self.n_ic < 1:
            raise ValueError("n_ic must be >= 1")

    def epoch_budget(self, round_idx):
        """Epoch cap for 1-based round k: floor(epochs * growth^(k-1)), min 1."""
        return max(1, math.floor(self.epochs * self.epoch_growth ** (round_idx - 1)))


@dataclass
class TrainingSet:
    x_res: np.ndarray  # (N, d) spatial residual points
    t_res: np.ndarray  # (N,) their times; never changed by resampling
    x_ic: np.ndarray  # (M, d) initial-condition points at t = 0

    def __post_init__(self):
        if len(self.x_res) != len(self.t_res):
            raise ValueError("residual points and times must align")
        for arr in (self.x_res, self.t_res, self.x_ic):
            if not np.all(np.isfinite(arr)):
                raise ValueError("training set contains non-finite values")

    @property
    def n_res(self):
        return len(self.x_res)

    @property
    def n_ic(self):
        return len(self.x_ic)

    def time_multiset(self):
        """All collocation times, IC points contributing zeros."""
        return np.concatenate([self.t_res, np.zeros(self.n_ic)])


def init_training_set(problem, config, rng):
    times = config.time_grid.build(problem.horizon)
    counts = config.counts.counts(len(times))
    total = int(counts.sum())
    x_res = problem.init_box.sample(total, rng)
    t_res = np.repeat(times, counts)
    x_ic = problem.init_box.sample(config.n_ic, rng)
    return TrainingSet(x_res, t_res, x_ic)


def resample_training_set(flow, ts, rng):
    """Redraw every spatial coordinate from the model at its own time.

    Point counts and the time multiset are preserved exactly; only spatial
    coordinates move.
    """
    new_x = np.empty_like(ts.x_res)
    uniq, inverse = np.unique(ts.t_res, return_inverse=True)
    for k, tval in enumerate(uniq):
        idx = np.nonzero(inverse == k)[0]
        new_x[idx] = flow.sample(float(tval), len(idx), rng)
    new_ic = flow.sample(0.0, ts.n_ic, rng)
    return TrainingSet(new_x, ts.t_res, new_ic)


class Adam:
    """Standard Adam with bias correction; updates rebind parameter values."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {id(p): np.zeros_like(p.value) for p in self.params}
        self.v = {id(p): np.zeros_like(p.value) for p in self.params}
        self.steps = 0
        self.skipped = 0

    def step(self, grads):
        """Apply one update; returns False (whole step skipped) on any non-finite gradient."""
        gs = []
        for p in self.params:
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.value)
            elif not np.all(np.isfinite(g)):
                self.skipped += 1
                return False
            gs.append(g)
        self.steps += 1
        b1c = 1.0 - self.beta1**self.steps
        b2c = 1.0 - self.beta2**self.steps
        for p, g in zip(self.params, gs):
            key = id(p)
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * g * g
            mhat = self.m[key] / b1c
            vhat = self.v[key] / b2c
            p.value = p.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return True


class TrainHooks:
    """Override any of these to observe training; defaults do nothing."""

    def on_epoch(self, round_idx, epoch_idx, loss, loss_res, loss_ic, wall):
        pass

    def on_round(self, round_idx, flow, next_set):
        """Called after a round finishes; next_set is post-resampling (or the
        unchanged final set after the last round)."""


@dataclass
class TrainResult:
    flow: object
    log_rows: list
    final_set: TrainingSet
    round_sets: list  # training set in effect for each round, by index
    skipped_steps: int


def train_adaptive(flow, problem, config, rng=None, hooks=None):
    if rng is None:
        rng = np.random.default_rng(config.seed)
    hooks = hooks or TrainHooks()
    ts = init_training_set(problem, config, rng)
    adam = Adam(flow.params(), config.lr)
    log_rows = []
    round_sets = [ts]
    actnorm_pending = True
    start = time.perf_counter()

    for round_idx in range(1, config.rounds + 1):
        budget = config.epoch_budget(round_idx)
        l_old = None
        for epoch_idx in range(1, budget + 1):
            n_res, n_ic = ts.n_res, ts.n_ic
            total = n_res + n_ic
            perm = rng.permutation(total)
            n_batches = -(-total // config.batch)
            batch_losses = []
            res_sum = ic_sum = 0.0
            res_pts = ic_pts = 0
            for b in range(n_batches):
                sel = perm[b * config.batch : (b + 1) * config.batch]
                rsel = sel[sel < n_res]
                isel = sel[sel >= n_res] - n_res
                batch_res = (ts.x_res[rsel], ts.t_res[rsel]) if len(rsel) else None
                batch_ic = ts.x_ic[isel] if len(isel) else None
                if actnorm_pending and batch_res is not None:
                    flow.init_actnorm(*batch_res)
                    actnorm_pending = False
                try:
                    tape, loss, parts = pde_loss(
                        flow, problem, batch_res, batch_ic, config.weights
                    )
                except (NonFiniteLossError, FlowEvalError) as e:
                    raise NonFiniteLossError(
                        f"aborted at round {round_idx}, epoch {epoch_idx}, "
                        f"batch {b + 1} of {n_batches}: {e}"
                    ) from e
                grads = tape.backward(loss)
                if adam.step(grads):
                    flow.clamp_parameters()
                batch_losses.append(float(T.raw(loss)))
                if len(rsel):
                    res_sum += parts["residual"] * len(rsel)
                    res_pts += len(rsel)
                if len(isel):
                    ic_sum += parts["init_cond"] * len(isel)
                    ic_pts += len(isel)

            l_new = float(np.mean(batch_losses))
            row = {
                "round": round_idx,
                "epoch": epoch_idx,
                "loss": l_new,
                "loss_residual": res_sum / res_pts if res_pts else 0.0,
                "loss_init": ic_sum / ic_pts if ic_pts else 0.0,
                "wall_time": time.perf_counter() - start,
            }
            log_rows.append(row)
            hooks.on_epoch(round_idx, epoch_idx, l_new, row["loss_residual"], row["loss_init"], row["wall_time"])
            if l_new < config.eps_loss:
                break
            # the delta test only makes sense once two epoch losses exist
            if l_old is not None and abs(l_old - l_new) < config.eps_delta:
                break
            l_old = l_new

        if round_idx < config.rounds:
            ts = resample_training_set(flow, ts, rng)
            round_sets.append(ts)
        hooks.on_round(round_idx, flow, ts)

    return TrainResult(flow, log_rows, ts, round_sets, adam.skipped)


def write_train_log(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
