"""Batch front end.

Subcommands:

  run              train a model from a config file, writing train_log.csv,
                   eval_report.csv, per-round checkpoints, 2D density grids,
                   and samples.csv into --out
  validate         run the built-in self-check suite for a config
  eval-checkpoint  reload a saved checkpoint and recompute its eval report
  sample           draw model samples at chosen times into samples.csv

Everything a run emits is a pure function of (config, seed); rerunning a
command rewrites byte-identical CSVs, except for the wall_time column of
train_log.csv which records real elapsed seconds.
"""

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .flows import TemporalFlow
from .metrics import chunked_log_density, evaluate_model, full_grid, write_eval_reports
from .reference import adi_solve
from .selfcheck import run_checks
from .training import TrainHooks, train_adaptive, write_train_log


def _float_fmt(v):
    return repr(float(v))


def _reference_for(problem, cfg, times):
    """A density callable for problems without a closed form (2D only)."""
    if problem.exact is not None:
        return None
    if problem.d != 2:
        raise ValueError(
            f"problem {problem.name!r} has no analytic solution and no 2D grid fallback"
        )
    t0 = time.perf_counter()
    print(
        f"computing finite-difference reference (dh={cfg.eval.ref_dh:g}, "
        f"dt={cfg.eval.ref_dt:g}) ...",
        flush=True,
    )
    sol = adi_solve(
        problem, dh=cfg.eval.ref_dh, dt=cfg.eval.ref_dt, snapshot_times=times
    )
    print(f"reference ready in {time.perf_counter() - t0:.1f}s", flush=True)
    return lambda x, t: sol(x, t)


def _dump_density_grids(flow, problem, times, grid_n, out_dir, threads, heatmaps=False):
    if problem.d != 2:
        return []
    pts = full_grid(problem, grid_n)
    written = []
    for t in times:
        dens = np.exp(chunked_log_density(flow, pts, np.full(len(pts), t), threads=threads))
        path = out_dir / f"density_t{t:g}.csv"
        with open(path, "w", newline="") as fh:
            fh.write("x,y,density\n")
            for row, v in zip(pts, dens):
                fh.write(f"{_float_fmt(row[0])},{_float_fmt(row[1])},{_float_fmt(v)}\n")
        written.append(path)
        if heatmaps:
            _write_ppm(dens.reshape(grid_n, grid_n), out_dir / f"density_t{t:g}.ppm")
    return written


def _write_ppm(grid, path):
    """Binary portable pixmap of a density grid, dark blue to yellow."""
    lo, hi = float(grid.min()), float(grid.max())
    u = (grid - lo) / (hi - lo) if hi > lo else np.zeros_like(grid)
    stops = np.array([[13, 8, 65], [188, 55, 84], [252, 255, 164]], dtype=np.float64)
    s = u * 2.0
    i = np.minimum(s.astype(int), 1)
    frac = (s - i)[..., None]
    rgb = stops[i] * (1 - frac) + stops[i + 1] * frac
    img = rgb.round().astype(np.uint8)[::-1]  # row 0 at the top = largest y
    with open(path, "wb") as fh:
        fh.write(f"P6 {grid.shape[1]} {grid.shape[0]} 255\n".encode())
        fh.write(img.tobytes())


def _write_samples(flow, times, path, seed, n, threads=1):
    rng = np.random.default_rng([int(seed), 50_000])
    with open(path, "w", newline="") as fh:
        fh.write("t," + ",".join(f"x{i}" for i in range(flow.d)) + "\n")
        for t in times:
            pts = flow.sample(t, n, rng)
            for row in pts:
                fh.write(_float_fmt(t) + "," + ",".join(_float_fmt(v) for v in row) + "\n")


def _load_run_config(args):
    cfg, notes = load_config(args.config, desk_scale=args.desk_scale)
    if getattr(args, "seed", None) is not None:
        notes.append(f"seed = {args.seed} (was {cfg.seed}, overridden by --seed)")
        cfg = replace(cfg, seed=args.seed, train=replace(cfg.train, seed=args.seed))
    for line in notes:
        print(line)
    return cfg


class _RoundObserver(TrainHooks):
    def __init__(self, cfg, problem, out_dir, times, reference, threads):
        self.cfg = cfg
        self.problem = problem
        self.out_dir = out_dir
        self.times = times
        self.reference = reference
        self.threads = threads
        self.reports = {}

    def on_epoch(self, round_idx, epoch_idx, loss, loss_res, loss_ic, wall):
        if epoch_idx == 1 or epoch_idx % 10 == 0:
            print(
                f"  round {round_idx} epoch {epoch_idx}: loss {loss:.6e} "
                f"(residual {loss_res:.3e}, init {loss_ic:.3e})",
                flush=True,
            )

    def on_round(self, round_idx, flow, next_set):
        flow.save(
            self.out_dir / f"checkpoint_round{round_idx}.json", extra={"round": round_idx}
        )
        report = evaluate_model(
            flow,
            self.problem,
            self.times,
            reference=self.reference,
            grid_n=self.cfg.eval.grid_n,
            n_v=self.cfg.eval.n_v,
            n_mc=self.cfg.eval.n_mc,
            seed=self.cfg.seed,
            tag=round_idx,
            threads=self.threads,
        )
        self.reports[round_idx] = report
        bits = ", ".join(
            f"t={r['t']:g}: L2 {r['relative_l2']:.4f} KL {r['relative_kl']:.4f}"
            for r in report.rows
        )
        print(f"round {round_idx} eval: {bits}", flush=True)


def cmd_run(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = _load_run_config(args)
    problem = cfg.make_problem()
    rng = np.random.default_rng(cfg.seed)
    flow = cfg.make_flow(problem.d, rng)
    times = cfg.eval.resolved_times(problem.horizon)
    reference = _reference_for(problem, cfg, times)

    observer = _RoundObserver(cfg, problem, out_dir, times, reference, args.threads)
    result = train_adaptive(flow, problem, cfg.train, hooks=observer)

    write_train_log(result.log_rows, out_dir / "train_log.csv")
    write_eval_reports(observer.reports, out_dir / "eval_report.csv")
    _dump_density_grids(
        result.flow, problem, times, cfg.eval.grid_n, out_dir, args.threads,
        heatmaps=args.heatmaps,
    )
    _write_samples(result.flow, times, out_dir / "samples.csv", cfg.seed, args.n_samples)
    if result.skipped_steps:
        print(f"note: {result.skipped_steps} optimizer steps skipped on non-finite gradients")
    print(f"artifacts written to {out_dir}")
    return 0


def cmd_validate(args):
    cfg = _load_run_config(args)
    results = run_checks(cfg, seed=cfg.seed, negative_control=args.negative_control)
    failed = 0
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        failed += not r.ok
        print(f"[{status}] {r.name}: {r.detail}")
    total = len(results)
    print(f"{total - failed}/{total} checks passed")
    return 1 if failed else 0


def cmd_eval_checkpoint(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = _load_run_config(args)
    try:
        with open(args.checkpoint) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"checkpoint {args.checkpoint} is not valid JSON: {exc}") from exc
    flow = TemporalFlow.from_dict(doc)
    problem = cfg.make_problem()
    if flow.d != problem.d:
        raise ValueError(
            f"checkpoint dimension {flow.d} does not match problem dimension {problem.d}"
        )
    round_idx = int(doc.get("round", 0))
    times = cfg.eval.resolved_times(problem.horizon)
    reference = _reference_for(problem, cfg, times)
    report = evaluate_model(
        flow,
        problem,
        times,
        reference=reference,
        grid_n=cfg.eval.grid_n,
        n_v=cfg.eval.n_v,
        n_mc=cfg.eval.n_mc,
        seed=cfg.seed,
        tag=round_idx,
        threads=args.threads,
    )
    write_eval_reports({round_idx: report}, out_dir / "eval_report.csv")
    for r in report.rows:
        print(
            f"round {round_idx} t={r['t']:g}: relative_l2 {r['relative_l2']!r} "
            f"relative_kl {r['relative_kl']!r} ({r['n_eval_points']} points)"
        )
    return 0


def cmd_sample(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = _load_run_config(args)
    problem = cfg.make_problem()
    if args.checkpoint is not None:
        flow = TemporalFlow.load(args.checkpoint)
        if flow.d != problem.d:
            raise ValueError(
                f"checkpoint dimension {flow.d} does not match problem dimension {problem.d}"
            )
    else:
        flow = cfg.make_flow(problem.d, np.random.default_rng(cfg.seed))
    if args.times:
        times = tuple(float(v) for v in args.times.split(","))
    else:
        times = cfg.eval.resolved_times(problem.horizon)
    path = out_dir / "samples.csv"
    _write_samples(flow, times, path, cfg.seed, args.n_samples)
    print(f"wrote {len(times) * args.n_samples} samples to {path}")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="fpflow",
        description="Mesh-free Fokker-Planck solver based on temporal normalizing flows.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to a JSON experiment config")
        p.add_argument("--out", default="fpflow_out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="evaluation worker threads")
        p.add_argument(
            "--desk-scale",
            action="store_true",
            help="apply the config's desk_scale overrides (reduced settings)",
        )

    p_run = sub.add_parser("run", help="train a model and write all artifacts")
    common(p_run)
    p_run.add_argument(
        "--heatmaps", action="store_true", help="also write PPM heatmaps of 2D densities"
    )
    p_run.add_argument("--n-samples", type=int, default=1000, help="draws per time in samples.csv")
    p_run.set_defaults(func=cmd_run)

    p_val = sub.add_parser("validate", help="run the self-check suite")
    common(p_val)
    p_val.add_argument(
        "--negative-control",
        action="store_true",
        help="flip the diffusion sign inside the residual check; the check must then fail",
    )
    p_val.set_defaults(func=cmd_validate)

    p_eval = sub.add_parser("eval-checkpoint", help="recompute metrics for a saved checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint JSON written by run")
    p_eval.set_defaults(func=cmd_eval_checkpoint)

    p_sample = sub.add_parser("sample", help="draw model samples into samples.csv")
    common(p_sample)
    p_sample.add_argument("--checkpoint", default=None, help="checkpoint JSON; identity flow if omitted")
    p_sample.add_argument("--times", default=None, help="comma-separated times (default: eval times)")
    p_sample.add_argument("--n-samples", type=int, default=1000, help="draws per time")
    p_sample.set_defaults(func=cmd_sample)
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        out_dir = Path(getattr(args, "out", "fpflow_out"))
        out_dir.mkdir(parents=True, exist_ok=True)
        record = {
            "command": args.command,
            "error": type(exc).__name__,
            "message": str(exc),
        }
        if isinstance(exc, ConfigError) and exc.path:
            record["field"] = exc.path
        with open(out_dir / "error.json", "w") as fh:
            json.dump(record, fh, indent=2)
            fh.write("\n")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
