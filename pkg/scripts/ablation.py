"""Run the prompting-mode and entity-source sweeps on one config and write a report.

    python3 scripts/ablation.py out/fixture/run.cfg [--epochs 2] [--plot]

At fixture scale the differences between settings are noise; the sweep
checks that every setting runs end to end.
"""

import argparse
import json
from pathlib import Path

from enrichrec.cli import SWEEPS, collect_runs, run_sweep, write_report
from enrichrec.config import load_config


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--keys", nargs="+", default=sorted(SWEEPS), choices=sorted(SWEEPS))
    p.add_argument("--plot", action="store_true")
    args = p.parse_args()
    cfg = load_config(args.config, {"epochs": args.epochs} if args.epochs else None)
    results = {key: run_sweep(cfg, key) for key in args.keys}
    rows = collect_runs(sorted((Path(cfg.run_dir) / "sweep").glob("*")))
    out = write_report(rows, Path(cfg.run_dir) / "report", plot=args.plot)
    print(json.dumps({"reports": results, **out}, indent=1))


if __name__ == "__main__":
    main()
