"""Write a seeded two-domain interaction log in the raw TSV format.

    python scripts/make_synthetic_log.py --users 50 --out data/log.tsv
    ddghm preprocess data/log.tsv --out data/processed.tsv
"""
import argparse
import sys
from pathlib import Path

from ddghm.data import serialize_events
from ddghm.synthetic import synthetic_log


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description="seeded synthetic interaction log")
    p.add_argument("--users", type=int, default=50)
    p.add_argument("--items", type=int, default=15)
    p.add_argument("--min-events", type=int, default=20)
    p.add_argument("--max-events", type=int, default=40)
    p.add_argument("--span-days", type=int, default=200)
    p.add_argument("--single-domain-users", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    a = p.parse_args(argv)
    events = synthetic_log(
        n_users=a.users,
        n_items=a.items,
        events_per_user=(a.min_events, a.max_events),
        span_days=a.span_days,
        single_domain_users=a.single_domain_users,
        seed=a.seed,
    )
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(serialize_events(events))
    print(f"{len(events)} events -> {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
