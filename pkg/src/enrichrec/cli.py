"""Command line entry point: ``enrichrec <verb> [--config FILE] [--key value ...]``.

Any config key can be overridden as ``--key value`` (dashes or underscores).
Results go to stdout as JSON, logs to stderr. Exit codes: 0 success,
2 configuration or input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

from . import workflow
from .config import load_config
from .data import ENTITY_SOURCES
from .enrichment import MODES
from .errors import CheckpointError, ConfigError, InputError

log = logging.getLogger("enrichrec")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SWEEPS = {"prompting_mode": MODES, "entity_source": ENTITY_SOURCES}


def _parse_overrides(extra):
    overrides, i = {}, 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--"):
            raise ConfigError(f"unexpected argument {arg!r}")
        key = arg[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra):
            value = extra[i + 1]
            i += 2
        else:
            raise ConfigError(f"override --{key} needs a value")
        overrides[key] = value
    return overrides


def build_parser():
    p = argparse.ArgumentParser(prog="enrichrec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key = value config file")
        return sp

    verb("enrich", "LLM title enrichment with entity verification")
    verb("preprocess", "build vocabularies, embeddings, features and training examples")
    verb("train", "train and keep the best dev-AUC checkpoint")
    ev = verb("evaluate", "score dev impressions with a checkpoint")
    ev.add_argument("--checkpoint")
    ev.add_argument("--oracle", action="store_true", help="score = label, to check the metric plumbing")
    ev.add_argument("--dump-predictions", nargs="?", const=True, default=None, metavar="PATH")
    ev.add_argument("--sweep", choices=sorted(SWEEPS), help="run the full pipeline once per setting of this key")
    pr = verb("predict", "rank one impression's candidates")
    pr.add_argument("--impression-id", required=True)
    pr.add_argument("--checkpoint")
    pr.add_argument("--oracle", action="store_true")
    rp = verb("report", "collect metrics of one or more runs into CSV (and a plot)")
    rp.add_argument("runs", nargs="*", help="run directories (default: the configured run_dir and its sweep/*)")
    rp.add_argument("--plot", action="store_true", help="also write a PNG")
    mf = sub.add_parser("make-fixture", help="write a synthetic MIND-format fixture")
    mf.add_argument("out_dir")
    mf.add_argument("--n-news", type=int, default=100)
    mf.add_argument("--n-impressions", type=int, default=200)
    mf.add_argument("--word-dim", type=int, default=50)
    mf.add_argument("--seed", type=int, default=0)
    return p


# ---------------------------------------------------------------- verbs


def run_sweep(cfg, key, values=None):
    """Full enrich -> preprocess -> train -> evaluate per value, each in its own run dir."""
    reports = {}
    for value in values or SWEEPS[key]:
        sub = cfg.replace(**{key: value, "run_dir": str(Path(cfg.run_dir) / "sweep" / f"{key}={value}"),
                             "enriched": "", "cache": cfg.cache, "checkpoint_dir": ""})
        sub.validate()
        if workflow.needs_enriched(sub):
            workflow.run_enrich(sub)
        workflow.run_preprocess(sub)
        workflow.run_train(sub)
        rep, _ = workflow.run_evaluate(sub)
        reports[value] = rep.as_dict()
    return reports


def collect_runs(run_dirs):
    rows = []
    for d in run_dirs:
        d = Path(d)
        metrics = d / "eval" / "metrics.json"
        if not metrics.exists():
            continue
        row = {"run": d.name if d.parent.name == "sweep" else str(d), **json.loads(metrics.read_text())}
        log_path = d / "train_log.jsonl"
        if log_path.exists():
            epochs = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
            row["epochs"] = len(epochs)
            row["final_loss"] = epochs[-1]["loss"] if epochs else None
            row["_curve"] = [e.get("dev", {}).get("auc") for e in epochs]
        rows.append(row)
    return rows


def write_report(rows, out_dir, plot=False):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "report.csv"
    columns = ["run", "auc", "mrr", "ndcg5", "ndcg10", "n_impressions", "n_skipped_auc", "epochs", "final_loss"]
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)
    out = {"csv": str(csv_path), "runs": len(rows)}
    if plot and rows:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
        names = [r["run"] for r in rows]
        for i, metric in enumerate(["auc", "mrr", "ndcg5", "ndcg10"]):
            ax1.bar([j + 0.2 * i for j in range(len(rows))], [r[metric] for r in rows], width=0.2, label=metric)
        ax1.set_xticks([j + 0.3 for j in range(len(rows))], names, rotation=20, fontsize=7)
        ax1.set_ylim(0, 1)
        ax1.legend(fontsize=7)
        for r in rows:
            if r.get("_curve"):
                ax2.plot(range(1, len(r["_curve"]) + 1), r["_curve"], marker="o", label=r["run"])
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("dev AUC")
        ax2.legend(fontsize=7)
        fig.tight_layout()
        png = out_dir / "report.png"
        fig.savefig(png, dpi=100)
        plt.close(fig)
        out["plot"] = str(png)
    return out


def dispatch(args, overrides):
    if args.verb == "make-fixture":
        from .synthetic import write_fixture

        return write_fixture(args.out_dir, args.n_news, args.n_impressions, args.word_dim, args.seed)
    cfg = load_config(args.config, overrides)
    if args.verb == "enrich":
        return workflow.run_enrich(cfg)
    if args.verb == "preprocess":
        return workflow.run_preprocess(cfg)
    if args.verb == "train":
        result = workflow.run_train(cfg)
        return {
            "checkpoint": result.best_checkpoint, "best_epoch": result.best_epoch, "best_auc": result.best_auc if math.isfinite(result.best_auc) else None,
            "epoch_losses": result.epoch_losses, "stopped_early": result.stopped_early,
            "seconds": round(result.seconds, 2),
        }
    if args.verb == "evaluate":
        if args.sweep:
            return {"sweep": args.sweep, "reports": run_sweep(cfg, args.sweep)}
        rep, _ = workflow.run_evaluate(cfg, args.checkpoint, args.oracle, args.dump_predictions)
        return rep.as_dict()
    if args.verb == "predict":
        return {"impression_id": args.impression_id,
                "ranking": workflow.run_predict(cfg, args.impression_id, args.checkpoint, args.oracle)}
    if args.verb == "report":
        run_dirs = args.runs or [cfg.run_dir, *sorted(str(p) for p in (Path(cfg.run_dir) / "sweep").glob("*"))]
        rows = collect_runs(run_dirs)
        if not rows:
            raise InputError(f"no evaluated runs found in {run_dirs}")
        out = write_report(rows, Path(cfg.run_dir) / "report", args.plot)
        workflow.record(cfg, "report", {k: v for k, v in out.items() if k != "runs"})
        return out
    raise ConfigError(f"unknown verb {args.verb}")


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _parse_overrides(extra)
        if args.verb == "make-fixture" and overrides:
            raise ConfigError(f"make-fixture takes no config overrides, got {sorted(overrides)}")
        result = dispatch(args, overrides)
    except (ConfigError, InputError, CheckpointError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.error("%s: %s", type(exc).__name__, exc, exc_info=args.verbose)
        return EXIT_RUNTIME
    json.dump(result, sys.stdout, indent=1, default=_jsonable)
    sys.stdout.write("\n")
    return EXIT_OK


def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    return str(obj)


if __name__ == "__main__":
    sys.exit(main())
