"""Evaluation metrics: relative L2 error and relative KL divergence.

Relative L2 compares model density values against a reference on a fixed
point set.  Relative KL is a Monte Carlo estimate of KL(ref || model)
normalized by the reference entropy, with samples drawn from the reference;
both sums run over the same draw so the estimate is deterministic per seed.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EvalReport",
    "relative_l2",
    "relative_kl",
    "chunked_log_density",
    "slice_grid",
    "evaluate_model",
    "write_eval_reports",
    "read_eval_rows",
]


def relative_l2(pred, ref):
    """sqrt(sum((pred - ref)^2)) / sqrt(sum(ref^2)) over one point set."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape or pred.size == 0:
        raise ValueError("prediction and reference must be matching nonempty arrays")
    denom = np.sqrt(np.sum(ref * ref))
    if denom == 0.0:
        raise ValueError("reference is zero everywhere on the evaluation set")
    return float(np.sqrt(np.sum((pred - ref) ** 2)) / denom)


def chunked_log_density(flow, x, t, threads=1, chunk=8192):
    """Evaluate flow.log_density in chunks, optionally across a thread pool.

    Results are concatenated in input order, so the output is identical
    whatever the worker count.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x),))
    if len(x) <= chunk:
        return flow.log_density(x, t)
    spans = [(k, min(k + chunk, len(x))) for k in range(0, len(x), chunk)]
    if threads <= 1:
        parts = [flow.log_density(x[a:b], t[a:b]) for a, b in spans]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda ab: flow.log_density(x[ab[0] : ab[1]], t[ab[0] : ab[1]]), spans))
    return np.concatenate(parts)


def relative_kl(flow, ref_density, ref_sampler, t, n_v, rng, threads=1):
    """MC estimate of KL(ref || model) / H(ref) at time t, x ~ ref."""
    if n_v < 1:
        raise ValueError("need at least one validation sample")
    x = ref_sampler(float(t), int(n_v), rng)
    ref_vals = np.asarray(ref_density(x, float(t)), dtype=np.float64)
    if np.any(ref_vals <= 0) or not np.all(np.isfinite(ref_vals)):
        raise ValueError("reference density must be positive at its own samples")
    log_ref = np.log(ref_vals)
    log_model = chunked_log_density(flow, x, t, threads=threads)
    if not np.all(np.isfinite(log_model)):
        raise RuntimeError("model log-density is non-finite at a validation sample")
    num = float(np.mean(log_ref - log_model))
    den = float(np.mean(-log_ref))
    return num / den


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # dicts: t, relative_l2, relative_kl, n_eval_points
    metadata: dict = field(default_factory=dict)

    def add(self, t, rel_l2, rel_kl, n_points):
        if n_points <= 0:
            raise ValueError("evaluation needs at least one point")
        self.rows.append(
            {
                "t": float(t),
                "relative_l2": float(rel_l2),
                "relative_kl": float(rel_kl) if rel_kl is not None else float("nan"),
                "n_eval_points": int(n_points),
            }
        )

    def row_at(self, t):
        for row in self.rows:
            if row["t"] == t:
                return row
        raise KeyError(f"no evaluation row at t = {t}")


def slice_grid(problem, n):
    """2D evaluation plane for d > 2: grid the two free coordinates of the
    problem's slice definition, hold the rest fixed."""
    sl = problem.eval_slice
    if sl is None:
        raise ValueError(f"problem {problem.name!r} defines no evaluation slice")
    free = np.nonzero(np.isnan(sl))[0]
    if len(free) != 2:
        raise ValueError("evaluation slice must leave exactly two coordinates free")
    a = np.linspace(problem.ref_box.lo[free[0]], problem.ref_box.hi[free[0]], n)
    b = np.linspace(problem.ref_box.lo[free[1]], problem.ref_box.hi[free[1]], n)
    A, B = np.meshgrid(a, b, indexing="ij")
    pts = np.tile(np.nan_to_num(sl), (n * n, 1))
    pts[:, free[0]] = A.ravel()
    pts[:, free[1]] = B.ravel()
    return pts


def full_grid(problem, n):
    xs = np.linspace(problem.ref_box.lo[0], problem.ref_box.hi[0], n)
    ys = np.linspace(problem.ref_box.lo[1], problem.ref_box.hi[1], n)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], axis=1)


def evaluate_model(
    flow,
    problem,
    times,
    reference=None,
    grid_n=201,
    n_v=100_000,
    n_mc=4096,
    seed=0,
    tag=0,
    threads=1,
):
    """Score the model at the given times; returns an EvalReport.

    The reference is the problem's closed form when present, else the
    `reference` callable (x, t) -> density (a GridSolution fits).  The KL
    column is filled only for problems with an exact sampler.  The sampling
    rng is derived from (seed, tag) alone, so recomputing with the same pair
    reproduces the report bit for bit.
    """
    if problem.exact is not None:
        ref_fn = problem.exact
    elif reference is not None:
        ref_fn = reference
    else:
        raise ValueError("no reference available: need an exact solution or a grid solution")

    report = EvalReport(
        metadata={
            "seed": int(seed),
            "tag": int(tag),
            "n_v": int(n_v),
            "grid_n": int(grid_n),
            "problem": problem.name,
        }
    )
    rng = np.random.default_rng([int(seed), 40000 + int(tag)])
    for t in times:
        t = float(t)
        if problem.d == 2:
            pts = full_grid(problem, grid_n)
        else:
            pts = slice_grid(problem, grid_n)
            if problem.exact_sampler is not None and n_mc > 0:
                pts = np.concatenate([pts, problem.exact_sampler(t, n_mc, rng)])
        ref_vals = np.asarray(ref_fn(pts, t), dtype=np.float64)
        pred = np.exp(chunked_log_density(flow, pts, t, threads=threads))
        rel2 = relative_l2(pred, ref_vals)
        if problem.exact is not None and problem.exact_sampler is not None:
            kl = relative_kl(
                flow, problem.exact, problem.exact_sampler, t, n_v, rng, threads=threads
            )
        else:
            kl = None
        report.add(t, rel2, kl, len(pts))
    return report


EVAL_COLUMNS = ("round", "t", "relative_l2", "relative_kl", "n_eval_points")


def write_eval_reports(reports, path):
    """Write {round: EvalReport} to one CSV; metadata rides in a comment line."""
    rounds = sorted(reports)
    meta = {str(r): reports[r].metadata for r in rounds}
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(EVAL_COLUMNS)
        for r in rounds:
            for row in reports[r].rows:
                writer.writerow(
                    [
                        r,
                        repr(row["t"]),
                        repr(row["relative_l2"]),
                        repr(row["relative_kl"]),
                        row["n_eval_points"],
                    ]
                )


def read_eval_rows(path):
    """Read back rows written by write_eval_reports."""
    rows = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for rec in csv.DictReader(lines):
        rows.append(
            {
                "round": int(rec["round"]),
                "t": float(rec["t"]),
                "relative_l2": float(rec["relative_l2"]),
                "relative_kl": float(rec["relative_kl"]),
                "n_eval_points": int(rec["n_eval_points"]),
            }
        )
    return rows
