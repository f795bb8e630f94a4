"""Fuse attentive gate: moves global-graph state into local node states.

All functions work on row batches, one row per transferring node, so a whole
timestep's transfer is a handful of matrix ops.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ContractError, ParameterStore, Tensor

GATE_NAMES = ("W_gen", "b_gen", "W_self", "v", "W_nei", "W_gz", "W_gr", "W_gh")
PLAIN_GATE_NAMES = ("W_gz", "W_gr", "W_gh")


def add_gate_params(store: ParameterStore, prefix: str, dim: int, plain: bool = False) -> None:
    d = dim
    if not plain:
        store.add(f"{prefix}.W_gen", (d * d, 2 * d))
        store.add(f"{prefix}.b_gen", (d * d,), scale=1.0 / np.sqrt(d))
        store.add(f"{prefix}.W_self", (d, d))
        store.add(f"{prefix}.v", (d,))
        store.add(f"{prefix}.W_nei", (d, d))
    for g in ("z", "r", "h"):
        store.add(f"{prefix}.W_g{g}", (d, 2 * d))


@dataclass
class TransferContext:
    """Everything the gate needs for one timestep.

    ``h_local``/``h_global`` hold the local and global states of the
    transferring nodes row by row.  ``neighbour_mask[x, i]`` marks global
    node i as a first-order neighbour of transferring node x.
    """

    nodes: list
    h_local: Tensor
    h_global: Tensor
    global_states: Tensor
    neighbour_mask: np.ndarray
    se_global: Tensor
    se_local: Tensor

    def neighbours(self) -> dict:
        return {k: list(np.flatnonzero(row)) for k, row in zip(self.nodes, self.neighbour_mask)}


def sequence_fusion(se_global: Tensor, se_local: Tensor, store: ParameterStore, prefix: str) -> Tensor:
    """Sequence-aware attention matrix: reshape(W_gen [SE_g; SE_l] + b_gen) to D x D."""
    if se_global.shape != se_local.shape or se_global.data.ndim != 1:
        raise ContractError(f"sequence embeddings differ in shape: {se_global.shape} vs {se_local.shape}")
    d = se_global.shape[0]
    flat = store[f"{prefix}.W_gen"] @ ag.concat([se_global, se_local]) + store[f"{prefix}.b_gen"]
    return ag.reshape(flat, (d, d))


def self_attentive(h_l: Tensor, h_g: Tensor, W_att: Tensor, store: ParameterStore, prefix: str) -> Tensor:
    v, W_self = store[f"{prefix}.v"], store[f"{prefix}.W_self"]
    own = ag.linear(h_l, W_self)
    a_l = ag.sigmoid(ag.linear(h_l, W_att) + own) @ v
    a_g = ag.sigmoid(ag.linear(h_g, W_att) + own) @ v
    n = h_l.shape[0]
    return ag.reshape(a_l, (n, 1)) * h_l + ag.reshape(a_g, (n, 1)) * h_g


def neighbour_attentive(
    h_l: Tensor,
    global_states: Tensor,
    mask: np.ndarray,
    W_att: Tensor,
    store: ParameterStore,
    prefix: str,
) -> tuple[Tensor, Tensor, np.ndarray]:
    """Bilinear softmax attention over each node's global neighbours.

    Returns ``(h_hat, weights, isolated)``; rows flagged in ``isolated``
    had no neighbour and get a zero ``h_hat``.
    """
    scores = ag.linear(ag.linear(h_l, store[f"{prefix}.W_nei"]), global_states)
    weights = ag.masked_softmax(scores, mask)
    h_hat = weights @ ag.linear(global_states, W_att)
    isolated = ~np.asarray(mask, dtype=bool).any(axis=1)
    return h_hat, weights, isolated


def gru_fuse(h_hat: Tensor, h_tilde: Tensor, store: ParameterStore, prefix: str) -> Tensor:
    x = ag.concat([h_hat, h_tilde], axis=1)
    z = ag.sigmoid(ag.linear(x, store[f"{prefix}.W_gz"]))
    r = ag.sigmoid(ag.linear(x, store[f"{prefix}.W_gr"]))
    cand = ag.tanh(ag.linear(ag.concat([h_hat, r * h_tilde], axis=1), store[f"{prefix}.W_gh"]))
    return (1.0 - z) * h_tilde + z * cand


def apply_gate(ctx: TransferContext, store: ParameterStore, prefix: str, plain: bool = False) -> Tensor:
    """Updated local states for every transferring node (rows of ``ctx.h_local``).

    With ``plain`` the gate degenerates to a bare GRU transfer unit taking the
    global state as input and the local state as hidden state.
    """
    if len(ctx.nodes) == 0:
        return ctx.h_local
    if plain:
        return gru_fuse(ctx.h_global, ctx.h_local, store, prefix)
    W_att = sequence_fusion(ctx.se_global, ctx.se_local, store, prefix)
    h_tilde = self_attentive(ctx.h_local, ctx.h_global, W_att, store, prefix)
    h_hat, _, _ = neighbour_attentive(ctx.h_local, ctx.global_states, ctx.neighbour_mask, W_att, store, prefix)
    return gru_fuse(h_hat, h_tilde, store, prefix)
