"""Item-transition graph snapshots, gated propagation and attention readout."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import ContractError, ParameterStore, Tensor

PROP_NAMES = ("W_in", "W_out", "b_in", "b_out", "W_z", "U_z", "W_r", "U_r", "W_o", "U_o")
READOUT_NAMES = ("W_a1", "W_a2", "c", "p", "W_a3")


@dataclass(frozen=True)
class GraphSnapshot:
    """Directed multigraph over the items seen so far.

    ``nodes`` lists node keys in insertion order; ``edges`` maps a
    ``(from_pos, to_pos)`` pair to its multiplicity.  Snapshots are never
    mutated: :func:`extend_snapshot` returns a new one.
    """

    nodes: tuple = ()
    edges: dict = field(default_factory=dict)
    t: int = 0

    @property
    def n(self) -> int:
        return len(self.nodes)

    def index(self, key: Hashable) -> int:
        return self.nodes.index(key)

    def __contains__(self, key) -> bool:
        return key in self.nodes

    def adjacency(self) -> tuple[np.ndarray, np.ndarray]:
        """Row-normalised ``(A_in, A_out)``, cached on first use.

        ``A_out[i, j]`` is the share of i's outgoing edge weight going to j;
        ``A_in[i, j]`` the share of i's incoming weight arriving from j.
        """
        cached = self.__dict__.get("_adj")
        if cached is None:
            cached = self._build_adjacency()
            object.__setattr__(self, "_adj", cached)
        return cached

    def _build_adjacency(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.n
        w = np.zeros((n, n))
        for (i, j), c in self.edges.items():
            w[i, j] += c
        out_deg = w.sum(axis=1, keepdims=True)
        a_out = np.divide(w, out_deg, out=np.zeros_like(w), where=out_deg > 0)
        wt = w.T
        in_deg = wt.sum(axis=1, keepdims=True)
        a_in = np.divide(wt, in_deg, out=np.zeros_like(wt), where=in_deg > 0)
        return a_in, a_out

    def neighbours(self, pos: int) -> list[int]:
        """Distinct first-order neighbours in either direction, excluding pos."""
        nb = set()
        for (i, j) in self.edges:
            if i == pos:
                nb.add(j)
            if j == pos:
                nb.add(i)
        nb.discard(pos)
        return sorted(nb)

    def edge_count(self) -> int:
        return int(sum(self.edges.values()))

    def dump_edges(self) -> str:
        """Edge list as ``from<TAB>to<TAB>count`` lines, sorted."""
        rows = sorted((str(self.nodes[i]), str(self.nodes[j]), c) for (i, j), c in self.edges.items())
        return "".join(f"{a}\t{b}\t{c}\n" for a, b, c in rows)


def add_node(prev: GraphSnapshot, key) -> GraphSnapshot:
    if key in prev.nodes:
        return GraphSnapshot(prev.nodes, dict(prev.edges), prev.t + 1)
    return GraphSnapshot(prev.nodes + (key,), dict(prev.edges), prev.t + 1)


def extend_snapshot(prev: GraphSnapshot, from_item, to_item) -> GraphSnapshot:
    nodes = prev.nodes
    for k in (from_item, to_item):
        if k not in nodes:
            nodes = nodes + (k,)
    edges = dict(prev.edges)
    e = (nodes.index(from_item), nodes.index(to_item))
    edges[e] = edges.get(e, 0) + 1
    return GraphSnapshot(nodes, edges, prev.t + 1)


def snapshot_from_sequence(keys: Sequence) -> GraphSnapshot:
    g = GraphSnapshot()
    for i, k in enumerate(keys):
        g = add_node(g, k) if i == 0 else extend_snapshot(g, keys[i - 1], k)
    return g


# --------------------------------------------------------------------------
# parameters


def add_propagation_params(store: ParameterStore, prefix: str, dim: int) -> None:
    d = dim
    store.add(f"{prefix}.W_in", (d, d))
    store.add(f"{prefix}.W_out", (d, d))
    store.add(f"{prefix}.b_in", (d,), scale=1.0 / np.sqrt(d))
    store.add(f"{prefix}.b_out", (d,), scale=1.0 / np.sqrt(d))
    for g in ("z", "r", "o"):
        store.add(f"{prefix}.W_{g}", (d, 2 * d))
        store.add(f"{prefix}.U_{g}", (d, d))


def add_readout_params(store: ParameterStore, prefix: str, dim: int) -> None:
    d = dim
    store.add(f"{prefix}.W_a1", (d, d))
    store.add(f"{prefix}.W_a2", (d, d))
    store.add(f"{prefix}.c", (d,), scale=1.0 / np.sqrt(d))
    store.add(f"{prefix}.p", (d,))
    store.add(f"{prefix}.W_a3", (d, 2 * d))


_lin = ag.linear


# --------------------------------------------------------------------------
# propagation and readout


def propagate(
    snapshot: GraphSnapshot,
    H: Tensor,
    store: ParameterStore,
    prefix: str,
    steps: int = 1,
    adjacency: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """K synchronous gated message-passing steps over every node.

    Incoming and outgoing messages get separate linear maps and are
    concatenated into a 2D-wide activation that drives GRU-style update and
    reset gates.
    """
    if H.shape[0] != snapshot.n:
        raise ContractError(f"{H.shape[0]} embedding rows for a {snapshot.n}-node snapshot")
    if steps < 0:
        raise ContractError(f"steps must be >= 0, got {steps}")
    a_in, a_out = adjacency if adjacency is not None else snapshot.adjacency()
    P = {k: store[f"{prefix}.{k}"] for k in PROP_NAMES}
    for _ in range(steps):
        m_in = _lin(a_in @ H, P["W_in"]) + P["b_in"]
        m_out = _lin(a_out @ H, P["W_out"]) + P["b_out"]
        a = ag.concat([m_in, m_out], axis=1)
        z = ag.sigmoid(_lin(a, P["W_z"]) + _lin(H, P["U_z"]))
        r = ag.sigmoid(_lin(a, P["W_r"]) + _lin(H, P["U_r"]))
        cand = ag.tanh(_lin(a, P["W_o"]) + _lin(r * H, P["U_o"]))
        H = (1.0 - z) * H + z * cand
    return H


def readout(H: Tensor, positions: Sequence[int], store: ParameterStore, prefix: str) -> Tensor:
    """Sequence embedding from node states.

    ``positions`` gives the node row of every sequence element in order; the
    last element is the current item.  Attention scores are unnormalised.
    """
    if len(positions) == 0:
        raise ContractError("readout of an empty sequence")
    R = {k: store[f"{prefix}.{k}"] for k in READOUT_NAMES}
    seq = ag.take(H, np.asarray(positions))
    last = ag.take(H, int(positions[-1]))
    q = ag.sigmoid(_lin(last, R["W_a1"]) + _lin(seq, R["W_a2"]) + R["c"])
    alpha = q @ R["p"]
    pooled = alpha @ seq
    return R["W_a3"] @ ag.concat([pooled, last])


def run_global_parts(global_nodes: Sequence[tuple[str, int]], H: Tensor):
    """Split global node states by source domain.

    Returns ``{domain: (row positions, Tensor rows)}``; rows are in global
    order so :func:`merge_global_parts` can invert the split.
    """
    out = {}
    for d in ("A", "B"):
        pos = [i for i, k in enumerate(global_nodes) if k[0] == d]
        rows = ag.take(H, np.asarray(pos, dtype=int)) if pos else Tensor(np.zeros((0, H.shape[1])))
        out[d] = (pos, rows)
    return out


def merge_global_parts(parts: dict, n: int, dim: int) -> np.ndarray:
    H = np.zeros((n, dim))
    for pos, rows in parts.values():
        if pos:
            H[pos] = rows.data
    return H
