"""Grid sweep over training hyperparameters on a processed file.

Each grid point trains from the same split and seed and reports the best
validation score; results go to stdout as TSV.

    python scripts/sweep.py data/processed.tsv --grid lambda_con=0,0.35,0.7 --grid margin=0.5,1.5 \
        --set dim=16 --set epochs=10
"""
import argparse
import itertools
import json
import sys

from ddghm.config import load_config
from ddghm.data import DOMAINS, read_processed, split
from ddghm.training import train


def parse_pairs(items, multi):
    out = {}
    for item in items:
        key, _, val = item.partition("=")
        vals = [json.loads(v) for v in val.split(",")]
        out[key] = vals if multi else vals[0]
    return out


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description="hyperparameter grid sweep")
    p.add_argument("processed")
    p.add_argument("--config")
    p.add_argument("--grid", action="append", default=[], help="field=v1,v2,...")
    p.add_argument("--set", action="append", default=[], help="field=value for every run")
    a = p.parse_args(argv)
    grid = parse_pairs(a.grid, multi=True)
    fixed = parse_pairs(a.set, multi=False)
    with open(a.processed, encoding="utf-8") as fh:
        data = read_processed(fh)
    n_items = {d: data.vocab.size(d) for d in DOMAINS}
    keys = sorted(grid)
    print("\t".join(keys + ["best_epoch", "best_val"]))
    for combo in itertools.product(*(grid[k] for k in keys)):
        data_cfg, cfg = load_config(a.config, overrides={**fixed, **dict(zip(keys, combo))})
        parts = split(data.triples, data_cfg.split_ratios, seed=cfg.seed)
        res = train(parts, cfg, n_items)
        print("\t".join([str(v) for v in combo] + [str(res.best_epoch), f"{res.best_score:.4f}"]), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
