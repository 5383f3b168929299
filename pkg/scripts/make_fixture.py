"""Write a synthetic MIND-format fixture plus a ready-to-use run config.

    python3 scripts/make_fixture.py out/fixture --n-news 100 --n-impressions 200
"""

import argparse
from pathlib import Path

from enrichrec.synthetic import write_fixture


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out_dir")
    p.add_argument("--n-news", type=int, default=100)
    p.add_argument("--n-impressions", type=int, default=200)
    p.add_argument("--word-dim", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    out = Path(args.out_dir).resolve()
    paths = write_fixture(out / "data", args.n_news, args.n_impressions, args.word_dim, args.seed)
    lines = [f"{k} = {v}" for k, v in paths.items()]
    lines += [f"run_dir = {out / 'run'}", f"word_dim = {args.word_dim}", "epochs = 2"]
    cfg = out / "run.cfg"
    cfg.write_text("\n".join(lines) + "\n")
    print(cfg)


if __name__ == "__main__":
    main()
