#!/usr/bin/env python3
"""Run the bundled experiments end to end.

By default every experiment runs at desk scale, i.e. with the reduced
settings from each config's desk_scale block, which finishes on a laptop.
Pass --full for the original settings; the 2D full runs take hours and the
4D/8D full runs are long overnight jobs.
"""

import argparse
import sys
from pathlib import Path

from fpflow.cli import main as fpflow_main

EXPERIMENTS = ("toy2d", "linear_osc", "nonlinear_osc", "advdiff4d", "advdiff8d")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--full", action="store_true", help="full-size settings (slow)")
    ap.add_argument("--only", action="append", choices=EXPERIMENTS,
                    help="run a subset (repeatable)")
    ap.add_argument("--out", default="results", help="root output directory")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    root = Path(__file__).resolve().parent.parent
    status = 0
    for name in args.only or EXPERIMENTS:
        argv = [
            "run",
            "--config", str(root / "configs" / f"{name}.json"),
            "--out", str(Path(args.out) / name),
            "--threads", str(args.threads),
            "--heatmaps",
        ]
        if not args.full:
            argv.append("--desk-scale")
        print(f"==== {name} ({'full' if args.full else 'desk'} scale) ====", flush=True)
        status = max(status, fpflow_main(argv))
    return status


if __name__ == "__main__":
    sys.exit(main())
