"""Hybrid metric training: NLL heads, collaborative WARP margin, contrastive views."""
from __future__ import annotations

import contextlib
import gc
import logging
import math
import time
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import AdamState, Tensor, adam_step, backward
from .config import TrainConfig
from .data import DOMAINS, DatasetSplit, SequenceTriple
from .metrics import CUTOFFS, METRICS, MetricReport, evaluate
from .model import DDGHM, truncate

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, norms: dict):
        super().__init__(message)
        self.norms = norms


@dataclass
class LossBreakdown:
    L_A: float
    L_B: float
    L_col: float
    L_con: float
    total: float

    def check(self, lambda_col: float, lambda_con: float, tol: float = 1e-10) -> None:
        expect = self.L_A + self.L_B + lambda_col * self.L_col + lambda_con * self.L_con
        if abs(expect - self.total) > tol * max(1.0, abs(expect)):
            raise AssertionError(f"loss decomposition broken: {self.total} vs {expect}")


# --------------------------------------------------------------------------
# heads and losses


def predict(H: Tensor, se: Tensor, bias: Tensor) -> Tensor:
    """Next-item distribution softmax(H @ SE + b) over one domain."""
    return ag.softmax(H @ se + bias)


def nll_loss(logits: list[Tensor], targets: list[np.ndarray], n_sequences: int | None = None) -> Tensor:
    """Summed next-item NLL per sequence, averaged over sequences.

    ``logits[s]`` holds one row of catalogue scores per prediction position
    of sequence s and ``targets[s]`` the matching item indices.
    """
    n = n_sequences if n_sequences is not None else len(logits)
    if n == 0:
        raise ValueError("nll over zero sequences")
    total = Tensor(0.0)
    for z, y in zip(logits, targets):
        if z is None or len(y) == 0:
            continue
        lp = ag.log_softmax(z, axis=1)
        total = total + ag.reduce_sum(ag.take(lp, (np.arange(len(y)), np.asarray(y))))
    return total * (-1.0 / n)


def warp_rank(user: np.ndarray, items: np.ndarray, j: int) -> int:
    """1 + number of catalogue items strictly closer to ``user`` than item j."""
    d = np.sum((items - user) ** 2, axis=1)
    return int(1 + np.count_nonzero(d < d[j]))


def rank_weights(user_emb: np.ndarray, item_emb: np.ndarray, triplets: np.ndarray) -> np.ndarray:
    """log(rank + 1) per (user row, positive) of each triplet, by exact sort."""
    d = ((user_emb[:, None, :] - item_emb[None, :, :]) ** 2).sum(axis=2)
    i, j = triplets[:, 0], triplets[:, 1]
    dij = d[i, j]
    ranks = 1 + (d[i] < dij[:, None]).sum(axis=1)
    return np.log(ranks + 1.0)


def collaborative_loss(
    user_emb: Tensor,
    item_emb: Tensor,
    triplets: np.ndarray,
    margin: float,
    weights: np.ndarray | None = None,
    normalizer: float = 1.0,
) -> Tensor:
    """Sum of w_ij * max(m + D(i,j)^2 - D(i,k)^2, 0) over ``(i, j, k)`` rows.

    ``weights`` default to the exact WARP rank weights and are constants
    for backprop.
    """
    triplets = np.asarray(triplets, dtype=int).reshape(-1, 3)
    if len(triplets) == 0:
        return Tensor(0.0)
    if weights is None:
        weights = rank_weights(user_emb.data, item_emb.data, triplets)
    u = ag.take(user_emb, triplets[:, 0])
    pos = u - ag.take(item_emb, triplets[:, 1])
    neg = u - ag.take(item_emb, triplets[:, 2])
    d_pos = ag.reduce_sum(pos * pos, axis=1)
    d_neg = ag.reduce_sum(neg * neg, axis=1)
    hinge = ag.relu(d_pos - d_neg + margin)
    return ag.reduce_sum(hinge * weights) * (1.0 / normalizer)


def sample_triplets(
    positives: list[set],
    forbidden: list[set],
    catalogue: int,
    n_neg: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """One row ``(user row, positive, negative)`` per positive and draw.

    Negatives come uniformly from items outside ``forbidden[row]``; rows
    with no admissible negative are skipped with a warning.
    """
    rows = []
    for r, (pos, bad) in enumerate(zip(positives, forbidden)):
        allowed = np.setdiff1d(np.arange(catalogue), np.fromiter(bad | pos, dtype=int, count=len(bad | pos)))
        if allowed.size == 0:
            warnings.warn(f"row {r}: history covers the whole catalogue, no negatives", RuntimeWarning)
            continue
        for j in sorted(pos):
            for k in rng.choice(allowed, size=n_neg, replace=True):
                rows.append((r, j, int(k)))
    return np.asarray(rows, dtype=int).reshape(-1, 3)


def contrastive_loss(views: Tensor) -> Tensor:
    """Softmax cross entropy over in-batch views, dot-product similarity.

    ``views`` rows come in pairs (original, masked) per user.  Each of the 2N
    rows is an anchor whose candidates are its partner plus the 2(N-1)
    other users' views; the result is the mean over anchors.
    """
    n2 = views.shape[0]
    if n2 % 2:
        raise ValueError(f"expected paired views, got {n2} rows")
    if n2 == 2:
        return Tensor(0.0)
    sim = views @ views.T
    cols = np.array([[c for c in range(n2) if c != r] for r in range(n2)])
    rows = np.repeat(np.arange(n2)[:, None], n2 - 1, axis=1)
    cand = ag.take(sim, (rows, cols))
    lp = ag.log_softmax(cand, axis=1)
    partner = np.arange(n2) ^ 1
    where = np.array([list(cols[r]).index(partner[r]) for r in range(n2)])
    return ag.reduce_sum(ag.take(lp, (np.arange(n2), where))) * (-1.0 / n2)


def item_mask(length: int, ratio: float, rng: np.random.Generator) -> frozenset:
    """ceil(ratio * length) distinct positions to replace by the MASK token."""
    if length == 0:
        return frozenset()
    n = min(length, math.ceil(ratio * length))
    return frozenset(int(x) for x in rng.choice(length, size=n, replace=False))


def total_loss(L_A, L_B, L_col, L_con, lambda_col: float, lambda_con: float):
    """L_A + L_B + lambda_col * L_col + lambda_con * L_con; ``None`` terms are absent."""
    total = L_A + L_B
    if L_col is not None:
        total = total + L_col * lambda_col
    if L_con is not None:
        total = total + L_con * lambda_con
    return total


# --------------------------------------------------------------------------
# one batch


@dataclass
class BatchDraws:
    """Random choices for one batch, fixed before the forward pass.

    Rank weights are filled on first use and then reused, so re-evaluating
    the same batch (finite differences) sees identical constants.
    """

    masks: list = field(default_factory=list)  # per triple: {domain: positions}
    triplets: dict = field(default_factory=dict)  # domain -> (n, 3) array
    weights: dict = field(default_factory=dict)  # domain -> array


def user_histories(triples: list[SequenceTriple]) -> dict:
    hist = defaultdict(lambda: {d: set() for d in DOMAINS})
    for tr in triples:
        for d in DOMAINS:
            hist[tr.user][d].update(it.item for it in tr.domain(d).items)
    return hist


def make_draws(model: DDGHM, batch: list[SequenceTriple], rng: np.random.Generator, history=None) -> BatchDraws:
    cfg = model.config
    draws = BatchDraws()
    if not cfg.no_con:
        draws.masks = [{d: item_mask(len(tr.domain(d)), cfg.mask_ratio, rng) for d in DOMAINS} for tr in batch]
    if not cfg.no_col:
        history = history if history is not None else user_histories(batch)
        for d in DOMAINS:
            pos = [{it.item for it in tr.domain(d).items} for tr in batch]
            bad = [history[tr.user][d] for tr in batch]
            draws.triplets[d] = sample_triplets(pos, bad, model.n_items[d], cfg.n_neg, rng)
    return draws


def _stack(rows: list[Tensor]) -> Tensor:
    return ag.concat([ag.reshape(r, (1, r.shape[0])) for r in rows])


def batch_loss(model: DDGHM, batch: list[SequenceTriple], draws: BatchDraws) -> tuple[Tensor, LossBreakdown]:
    cfg = model.config
    n = len(batch)
    outs = model.forward_batch(batch)
    nll = {}
    for d in DOMAINS:
        logits, targets = [], []
        for out in outs:
            preds = out.predictions[d]
            if not preds:
                continue
            S = _stack([se for se, _ in preds])
            logits.append(S @ model.item_table(d).T + model.store[f"bias.{d}"])
            targets.append(np.array([y for _, y in preds]))
        nll[d] = nll_loss(logits, targets, n) if logits else Tensor(0.0)

    L_col = None
    if not cfg.no_col:
        L_col = Tensor(0.0)
        for d in DOMAINS:
            keep = [r for r, out in enumerate(outs) if out.se[d] is not None]
            trip = draws.triplets.get(d, np.zeros((0, 3), dtype=int))
            trip = trip[np.isin(trip[:, 0], keep)]
            if not len(trip):
                continue
            users = _stack([outs[r].se[d] if outs[r].se[d] is not None else Tensor(np.zeros(cfg.dim)) for r in range(n)])
            items = model.item_table(d)
            if d not in draws.weights:
                draws.weights[d] = rank_weights(users.data, items.data, trip)
            L_col = L_col + collaborative_loss(users, items, trip, cfg.margin, draws.weights[d], normalizer=n)

    L_con = None
    if not cfg.no_con:
        L_con = Tensor(0.0)
        masked_outs = [model.run_sequence(tr, masked=m, collect=False) for tr, m in zip(batch, draws.masks)]
        for d in DOMAINS:
            rows = []
            for o, mo in zip(outs, masked_outs):
                if o.se[d] is not None and mo.se[d] is not None:
                    rows += [o.se[d], mo.se[d]]
            if rows:
                L_con = L_con + contrastive_loss(_stack(rows))

    total = total_loss(nll["A"], nll["B"], L_col, L_con, cfg.lambda_col, cfg.lambda_con)
    parts = LossBreakdown(
        L_A=nll["A"].item(),
        L_B=nll["B"].item(),
        L_col=L_col.item() if L_col is not None else 0.0,
        L_con=L_con.item() if L_con is not None else 0.0,
        total=total.item(),
    )
    parts.check(cfg.lambda_col, cfg.lambda_con)
    return total, parts


# --------------------------------------------------------------------------
# training loop

LOG_COLUMNS = (
    ["epoch", "L_A", "L_B", "L_col", "L_con", "total"]
    + [f"val_{m}@{k}" for m in METRICS for k in CUTOFFS]
)


@dataclass
class EpochLog:
    epoch: int
    loss: LossBreakdown
    val: MetricReport | None
    seconds: float

    def tsv(self) -> str:
        vals = [str(self.epoch)] + [
            f"{getattr(self.loss, k):.10g}" for k in ("L_A", "L_B", "L_col", "L_con", "total")
        ]
        for m in METRICS:
            for k in CUTOFFS:
                key = f"{m}@{k}"
                vals.append(f"{self.val.mean(key):.6f}" if self.val and self.val.table else "nan")
        return "\t".join(vals)


@contextlib.contextmanager
def _fewer_gc_passes(threshold: int = 100_000):
    # The tape holds no reference cycles, yet every op allocates; the default
    # gen-0 threshold makes the collector rescan live tapes constantly.
    old = gc.get_threshold()
    gc.set_threshold(threshold, *old[1:])
    try:
        yield
    finally:
        gc.set_threshold(*old)


@dataclass
class TrainResult:
    model: DDGHM
    history: list[EpochLog]
    best_epoch: int
    best_score: float


def train(
    split: DatasetSplit | list[SequenceTriple],
    config: TrainConfig,
    n_items: dict,
    on_epoch=None,
    model: DDGHM | None = None,
) -> TrainResult:
    """Minibatch Adam over the hybrid loss, keeping the best-validation weights.

    Validation is scored by ``config.select_metric`` averaged over domains;
    without a validation split the final epoch wins.  ``on_epoch`` sees each
    epoch's log entry and may return True to stop early.
    """
    config.validate()
    if isinstance(split, list):
        split = DatasetSplit(split, [], [])
    if not split.train:
        raise ValueError("empty training split")
    model = model or DDGHM(n_items, config)
    train_set = [truncate(tr, config.max_len) for tr in split.train]
    val_set = [truncate(tr, config.max_len) for tr in split.validation]
    history_sets = user_histories(train_set)
    rng = np.random.default_rng([config.seed, 1])
    adam = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    history: list[EpochLog] = []
    best, best_epoch, best_blob = -math.inf, 0, None

    with _fewer_gc_passes():
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(train_set))
            acc = np.zeros(5)
            for start in range(0, len(order), config.batch_size):
                batch = [train_set[i] for i in order[start:start + config.batch_size]]
                draws = make_draws(model, batch, rng, history_sets)
                loss, parts = batch_loss(model, batch, draws)
                if not math.isfinite(parts.total):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}", model.store.norms())
                backward(loss, model.store)
                adam_step(model.store, adam)
                acc += len(batch) * np.array([parts.L_A, parts.L_B, parts.L_col, parts.L_con, parts.total])
            acc /= len(train_set)
            val = evaluate(model, val_set) if val_set else None
            entry = EpochLog(epoch, LossBreakdown(*acc), val, time.perf_counter() - t0)
            history.append(entry)
            log.info("epoch %d total=%.5f", epoch, entry.loss.total)
            score = val.mean(config.select_metric) if val is not None and val.table else float(epoch)
            if math.isnan(score):
                score = -math.inf
            if score > best or best_blob is None:
                best, best_epoch = score, epoch
                best_blob = {k: p.data.copy() for k, p in model.store.params.items()}
            if on_epoch is not None and on_epoch(entry):
                break
    if best_blob is not None:
        for k, v in best_blob.items():
            model.store.set(k, v)
    return TrainResult(model, history, best_epoch, best)


def gradcheck_full_loss(seed: int = 0, dim: int = 3, eps: float = 1e-5, length: int = 4) -> dict:
    """Finite-difference check of the complete four-term loss.

    Seeded toy: 2 users, 6 items per domain.  Masks, negatives and rank
    weights are drawn once and held fixed across all probes.
    """
    from .synthetic import toy_problem

    cfg = TrainConfig(dim=dim, seed=seed, lambda_col=1.0, lambda_con=0.7, margin=1.5)
    batch = toy_problem(n_users=2, n_items=6, length=length, seed=seed)
    model = DDGHM({"A": 6, "B": 6}, cfg)
    draws = make_draws(model, batch, np.random.default_rng([seed, 2]))

    def f(_store):
        return batch_loss(model, batch, draws)[0]

    t0 = time.perf_counter()
    err = ag.grad_check(f, model.store, eps=eps)
    return {
        "max_relative_error": err,
        "parameters": model.store.num_entries(),
        "seconds": time.perf_counter() - t0,
        "loss": f(model.store).item(),
    }
