"""Seeded synthetic interaction data for tests, the CLI gradcheck and scripts."""
from __future__ import annotations

import numpy as np

from .data import DAY, InteractionEvent, SequenceTriple, make_triple


def random_triple(user: int, n_items: dict, lengths: tuple[int, int], rng: np.random.Generator) -> SequenceTriple:
    """Random items with random interleaving of the two domains."""
    la, lb = lengths
    kinds = rng.permutation(["A"] * la + ["B"] * lb)
    a, b = [], []
    for t, k in enumerate(kinds):
        item = int(rng.integers(n_items[k]))
        (a if k == "A" else b).append((item, 10 * t))
    return make_triple(user, a, b)


def toy_problem(n_users: int = 2, n_items: int = 6, length: int = 4, seed: int = 0) -> list[SequenceTriple]:
    rng = np.random.default_rng(seed)
    sizes = {"A": n_items, "B": n_items}
    return [random_triple(u, sizes, (length, length), rng) for u in range(n_users)]


def memorization_problem(n_users: int = 4, n_items: int = 10, length: int = 6, seed: int = 0):
    """Each user walks a fixed random path through each catalogue."""
    rng = np.random.default_rng(seed)
    triples = []
    for u in range(n_users):
        pa = rng.choice(n_items, size=length, replace=False)
        pb = rng.choice(n_items, size=length, replace=False)
        kinds = rng.permutation(["A"] * length + ["B"] * length)
        ia = ib = 0
        a, b = [], []
        for t, k in enumerate(kinds):
            if k == "A":
                a.append((int(pa[ia]), t))
                ia += 1
            else:
                b.append((int(pb[ib]), t))
                ib += 1
        triples.append(make_triple(u, a, b))
    return triples


def transfer_problem(
    n_users: int = 120,
    n_items: int = 20,
    pairs: int = 5,
    seed: int = 0,
    mapping_seed: int = 12345,
):
    """Alternating A/B sequences where each B item is a fixed function of the
    A item just before the previous B event.

    The merged order is ``A1 B1 A2 B2 ...`` with ``B_j = f(A_{j-1})`` for
    j >= 2 and B1 random, so domain-B history alone carries no signal about
    the next B item, while the A stream determines it.  The map ``f`` is
    fixed by ``mapping_seed`` so every user shares it.
    """
    f = np.random.default_rng(mapping_seed).permutation(n_items)
    rng = np.random.default_rng(seed)
    triples = []
    for u in range(n_users):
        av = rng.integers(n_items, size=pairs)
        bv = [int(rng.integers(n_items))] + [int(f[av[j - 1]]) for j in range(1, pairs)]
        a = [(int(av[j]), 2 * j) for j in range(pairs)]
        b = [(bv[j], 2 * j + 1) for j in range(pairs)]
        triples.append(make_triple(u, a, b))
    return triples


def synthetic_log(
    n_users: int = 50,
    n_items: int = 15,
    events_per_user: tuple[int, int] = (20, 40),
    span_days: int = 200,
    single_domain_users: int = 5,
    seed: int = 0,
) -> list[InteractionEvent]:
    """Raw events over two domains with a few single-domain users mixed in."""
    rng = np.random.default_rng(seed)
    events = []
    for u in range(n_users + single_domain_users):
        n = int(rng.integers(*events_per_user))
        doms = ["A"] * n if u >= n_users else list(rng.choice(["A", "B"], size=n))
        ts = np.sort(rng.integers(0, span_days * DAY, size=n))
        pop = rng.zipf(1.6, size=n) % n_items
        for d, t, i in zip(doms, ts, pop):
            events.append(InteractionEvent(f"u{u}", f"{d.lower()}{int(i)}", float(rng.integers(1, 6)), int(t), str(d)))
    return events
