"""Full model against its ablations on the synthetic transfer task.

Domain-B targets are a fixed permutation of an earlier domain-A item, so a
model that only sees the B history sits at chance on B.  Each seed draws a
fresh training population and a larger held-out population from the same
generator; the script prints one TSV row per (seed, variant).

    python scripts/ablation_transfer.py --seeds 0-9 --variants full,local_only
"""
from __future__ import annotations

import argparse
import sys
import time

from ddghm.config import TrainConfig
from ddghm.metrics import evaluate
from ddghm.synthetic import transfer_problem
from ddghm.training import train

VARIANTS = {
    "full": {},
    "local_only": {"local_only": True},
    "global_only": {"global_only": True},
    "plain_gru_gate": {"plain_gru_gate": True},
    "no_col": {"no_col": True},
    "no_con": {"no_con": True},
}


def parse_seeds(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        lo, _, hi = part.partition("-")
        out += list(range(int(lo), int(hi or lo) + 1))
    return out


def run_seed(seed: int, variants, *, n_users=80, n_test=200, n_items=20, pairs=5, dim=16, epochs=20, lr=0.01, batch_size=10):
    """Test-set B HR@5 per variant for one seed."""
    train_set = transfer_problem(n_users=n_users, n_items=n_items, pairs=pairs, seed=seed)
    test_set = transfer_problem(n_users=n_test, n_items=n_items, pairs=pairs, seed=10_000 + seed)
    n = {"A": n_items, "B": n_items}
    scores = {}
    for name in variants:
        cfg = TrainConfig(dim=dim, epochs=epochs, lr=lr, batch_size=batch_size, seed=seed, **VARIANTS[name])
        t0 = time.perf_counter()
        res = train(train_set, cfg, n)
        rep = evaluate(res.model, test_set)
        scores[name] = {
            "B_HR@5": rep.table["B"]["HR@5"],
            "A_HR@5": rep.table["A"]["HR@5"],
            "seconds": time.perf_counter() - t0,
        }
    return scores


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", default="0-9")
    p.add_argument("--variants", default="full,local_only")
    p.add_argument("--users", type=int, default=80)
    p.add_argument("--items", type=int, default=20)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.01)
    args = p.parse_args(argv)
    variants = args.variants.split(",")
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        p.error(f"unknown variants {unknown}")
    print("seed\tvariant\tB_HR@5\tA_HR@5\tseconds")
    for seed in parse_seeds(args.seeds):
        res = run_seed(seed, variants, n_users=args.users, n_items=args.items, dim=args.dim, epochs=args.epochs, lr=args.lr)
        for v, r in res.items():
            print(f"{seed}\t{v}\t{r['B_HR@5']:.4f}\t{r['A_HR@5']:.4f}\t{r['seconds']:.1f}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
