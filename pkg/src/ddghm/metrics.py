"""Full-catalogue ranking metrics with one relevant item per list."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .data import DOMAINS, SequenceTriple

CUTOFFS = (5, 10, 20)
METRICS = ("HR", "NDCG", "MRR")


class Scorer(Protocol):
    def score_heldout(self, triple: SequenceTriple) -> dict: ...


def rank_ground_truth(scores, target: int) -> int:
    """1-based rank of ``target``; equal scores are ordered by item index."""
    s = np.asarray(scores, dtype=np.float64)
    t = s[target]
    return int(1 + np.count_nonzero(s > t) + np.count_nonzero(s[:target] == t))


def _ranks(ranks: Sequence[int]) -> np.ndarray:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no ranks to aggregate")
    if np.any(r < 1):
        raise ValueError("ranks are 1-based")
    return r


def _check_k(k: int) -> None:
    if k < 1:
        raise ValueError(f"cut-off must be >= 1, got {k}")


def hr_at_k(ranks, k: int) -> float:
    _check_k(k)
    r = _ranks(ranks)
    return float(np.mean(r <= k))


def ndcg_at_k(ranks, k: int) -> float:
    _check_k(k)
    r = _ranks(ranks)
    return float(np.mean(np.where(r <= k, 1.0 / np.log2(r + 1.0), 0.0)))


def mrr_at_k(ranks, k: int) -> float:
    _check_k(k)
    r = _ranks(ranks)
    return float(np.mean(np.where(r <= k, 1.0 / r, 0.0)))


METRIC_FNS = {"HR": hr_at_k, "NDCG": ndcg_at_k, "MRR": mrr_at_k}


def metric_row(ranks, cutoffs=CUTOFFS) -> dict:
    return {f"{m}@{k}": METRIC_FNS[m](ranks, k) for m in METRICS for k in cutoffs}


@dataclass
class RankingResult:
    domain: str
    ranks: list = field(default_factory=list)
    catalogue: int = 0


@dataclass
class MetricReport:
    table: dict  # domain -> {"HR@5": ...}
    counts: dict  # domain -> number of ranked sequences
    skipped: dict  # domain -> sequences without a held-out item

    def mean(self, key: str) -> float:
        vals = [row[key] for row in self.table.values()]
        return float(np.mean(vals)) if vals else math.nan

    def to_json(self) -> str:
        return json.dumps(
            {"metrics": self.table, "counts": self.counts, "skipped": self.skipped}, indent=2, sort_keys=True
        )

    def to_tsv(self) -> str:
        keys = [f"{m}@{k}" for m in METRICS for k in CUTOFFS]
        lines = ["domain\tn\t" + "\t".join(keys)]
        for d in sorted(self.table):
            vals = "\t".join(f"{self.table[d][k]:.6f}" for k in keys)
            lines.append(f"{d}\t{self.counts[d]}\t{vals}")
        return "\n".join(lines) + "\n"


def evaluate(model: Scorer, triples: Iterable[SequenceTriple], cutoffs=CUTOFFS) -> MetricReport:
    """Hold out each domain's last item, rank it against the whole catalogue."""
    triples = list(triples)
    if not triples:
        raise ValueError("evaluation split is empty")
    results = {d: RankingResult(d) for d in DOMAINS}
    skipped = {d: 0 for d in DOMAINS}
    for tr in triples:
        scored = model.score_heldout(tr)
        for d in DOMAINS:
            if d not in scored:
                skipped[d] += 1
                continue
            scores, target = scored[d]
            results[d].ranks.append(rank_ground_truth(scores, target))
            results[d].catalogue = len(scores)
    table = {d: metric_row(r.ranks, cutoffs) for d, r in results.items() if r.ranks}
    return MetricReport(table, {d: len(results[d].ranks) for d in DOMAINS}, skipped)
