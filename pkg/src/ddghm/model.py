"""Dual dynamic graph model: per-event loop over local and global graphs."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import ContractError, ParameterStore, Tensor
from .config import TrainConfig, to_dict, train_config_from_dict
from .data import DOMAINS, SequenceTriple, check_triple, make_triple
from .gate import TransferContext, add_gate_params, apply_gate
from .graph import (
    GraphSnapshot,
    add_node,
    add_propagation_params,
    add_readout_params,
    extend_snapshot,
    propagate,
    readout,
)

CKPT_MAGIC = b"DDGHM-CKPT-1\n"


class CheckpointError(ValueError):
    pass


@dataclass
class _Graph:
    snapshot: GraphSnapshot = field(default_factory=GraphSnapshot)
    H: Tensor | None = None
    order: list = field(default_factory=list)  # node row per sequence element
    last_key: object = None

    def push(self, key, row: Tensor, store: ParameterStore, prefix: str, steps: int) -> None:
        snap = self.snapshot
        if self.last_key is None:
            snap = add_node(snap, key)
        else:
            snap = extend_snapshot(snap, self.last_key, key)
        if snap.n > self.snapshot.n:
            self.H = row if self.H is None else ag.concat([self.H, row])
        self.snapshot = snap
        self.last_key = key
        self.order.append(snap.index(key))
        self.H = propagate(snap, self.H, store, prefix, steps)


@dataclass
class StepTrace:
    t: int
    key: tuple
    transfer: list
    neighbours: dict
    local_states: dict | None = None
    global_states: np.ndarray | None = None


@dataclass
class SequenceOutput:
    se: dict  # domain -> Tensor or None
    local_nodes: dict  # domain -> node keys
    local_states: dict  # domain -> Tensor or None
    predictions: dict  # domain -> list of (Tensor SE, target item)
    trace: list = field(default_factory=list)
    global_nodes: tuple = ()
    global_states: Tensor | None = None


def truncate(triple: SequenceTriple, max_len: int) -> SequenceTriple:
    """Keep the most recent ``max_len`` merged events."""
    if len(triple.m) <= max_len:
        return triple
    keep = triple.m.items[-max_len:]
    a = [(it.item, it.timestamp) for it in keep if it.source == "A"]
    b = [(it.item, it.timestamp) for it in keep if it.source == "B"]
    return make_triple(triple.user, a, b)


def drop_last_per_domain(triple: SequenceTriple) -> tuple[SequenceTriple, dict]:
    """Remove each domain's latest item; return the shortened triple and the targets."""
    targets = {}
    keep = {}
    for d in DOMAINS:
        items = triple.domain(d).items
        if len(items) >= 2:
            targets[d] = items[-1].item
            keep[d] = items[:-1]
        else:
            keep[d] = items
    pairs = {d: [(it.item, it.timestamp) for it in keep[d]] for d in DOMAINS}
    return make_triple(triple.user, pairs["A"], pairs["B"]), targets


class DDGHM:
    """Parameters plus the per-sequence forward pass.

    Ablation flags on the config decide which parameter groups exist, so the
    variants differ structurally rather than by zeroed weights.
    """

    def __init__(self, n_items: dict, config: TrainConfig):
        config.validate()
        self.config = config
        self.n_items = {d: int(n_items[d]) for d in DOMAINS}
        D = config.dim
        s = self.store = ParameterStore(config.seed)
        extra = 0 if config.no_con else 1  # MASK row
        for d in DOMAINS:
            s.add(f"emb.{d}", (self.n_items[d] + extra, D))
        for d in DOMAINS:
            s.add(f"bias.{d}", (self.n_items[d],), scale=1.0 / np.sqrt(D))
        if config.use_local:
            for d in DOMAINS:
                add_propagation_params(s, f"prop.{d}", D)
                add_readout_params(s, f"read.{d}l", D)
        if config.use_global:
            add_propagation_params(s, "prop.M", D)
        if self._global_readout:
            for d in DOMAINS:
                add_readout_params(s, f"read.{d}g", D)
        if config.use_gate:
            for d in DOMAINS:
                add_gate_params(s, f"gate.{d}", D, plain=config.plain_gru_gate)

    @property
    def _global_readout(self) -> bool:
        cfg = self.config
        return cfg.global_only or (cfg.use_gate and not cfg.plain_gru_gate)

    def mask_index(self, domain: str) -> int:
        if self.config.no_con:
            raise ContractError("no MASK token when the contrastive term is disabled")
        return self.n_items[domain]

    def _embed(self, domain: str, item: int) -> Tensor:
        return ag.take(self.store[f"emb.{domain}"], np.array([item]))

    def check_items(self, triple: SequenceTriple) -> None:
        for d in DOMAINS:
            for it in triple.domain(d).items:
                if not 0 <= it.item < self.n_items[d]:
                    raise ContractError(f"item {it.item} outside domain {d} catalogue of {self.n_items[d]}")

    def run_sequence(
        self,
        triple: SequenceTriple,
        masked: dict | None = None,
        collect: bool = True,
        trace: bool = False,
        trace_states: bool = False,
    ) -> SequenceOutput:
        """Process the merged sequence event by event.

        ``masked`` maps a domain to positions (within that domain's sequence)
        whose item is replaced by the MASK token.  When ``collect`` is set,
        every event that has local history records the pre-event sequence
        embedding together with its item as a next-item prediction target.
        """
        check_triple(triple)
        self.check_items(triple)
        cfg, store, K = self.config, self.store, self.config.steps
        masked = masked or {}
        local = {d: _Graph() for d in DOMAINS}
        glob = _Graph()
        g_order = {d: [] for d in DOMAINS}  # global rows of each domain's elements
        dom_pos = {d: 0 for d in DOMAINS}
        preds = {d: [] for d in DOMAINS}
        steps: list[StepTrace] = []

        for t, it in enumerate(triple.m.items):
            X = it.source
            p = dom_pos[X]
            dom_pos[X] += 1
            is_masked = p in masked.get(X, ())
            item = self.mask_index(X) if is_masked else it.item
            L = local[X]
            has_local = cfg.use_local and L.snapshot.n > 0
            has_global = cfg.use_global and len(g_order[X]) > 0
            want_pred = collect and not is_masked
            fuse = cfg.use_gate and not cfg.plain_gru_gate
            se_l = se_g = None
            if has_local and (want_pred or fuse):
                se_l = readout(L.H, L.order, store, f"read.{X}l")
            if has_global and (fuse or (want_pred and not cfg.use_local)):
                se_g = readout(glob.H, g_order[X], store, f"read.{X}g")
            if want_pred:
                se = se_l if cfg.use_local else se_g
                if se is not None:
                    preds[X].append((se, item))

            transfer, nbrs = [], {}
            if cfg.use_gate and has_local:
                ctx = self._context(X, L, glob, se_g, se_l)
                L.H = apply_gate(ctx, store, f"gate.{X}", plain=cfg.plain_gru_gate)
                transfer = list(ctx.nodes)
                nbrs = {k: [glob.snapshot.nodes[i] for i in v] for k, v in ctx.neighbours().items()}

            if cfg.use_local:
                L.push(item, self._embed(X, item), store, f"prop.{X}", K)
            if cfg.use_global:
                glob.push((X, item), self._embed(X, item), store, "prop.M", K)
                g_order[X].append(glob.snapshot.index((X, item)))

            if trace:
                st = StepTrace(t, (X, item), transfer, nbrs)
                if trace_states:
                    st.local_states = {d: None if local[d].H is None else local[d].H.data.copy() for d in DOMAINS}
                    st.global_states = None if glob.H is None else glob.H.data.copy()
                steps.append(st)

        se_final = {}
        for d in DOMAINS:
            if cfg.use_local:
                G = local[d]
                se_final[d] = readout(G.H, G.order, store, f"read.{d}l") if G.order else None
            else:
                se_final[d] = readout(glob.H, g_order[d], store, f"read.{d}g") if g_order[d] else None
        return SequenceOutput(
            se=se_final,
            local_nodes={d: local[d].snapshot.nodes for d in DOMAINS},
            local_states={d: local[d].H for d in DOMAINS},
            predictions=preds,
            trace=steps,
            global_nodes=glob.snapshot.nodes,
            global_states=glob.H,
        )

    def _context(self, X, L: _Graph, glob: _Graph, se_g, se_l) -> TransferContext:
        nodes = list(L.snapshot.nodes)
        gsnap = glob.snapshot
        gpos = [gsnap.index((X, k)) for k in nodes]
        mask = np.zeros((len(nodes), gsnap.n), dtype=bool)
        for r, gp in enumerate(gpos):
            mask[r, gsnap.neighbours(gp)] = True
        return TransferContext(
            nodes=nodes,
            h_local=L.H,
            h_global=ag.take(glob.H, np.asarray(gpos)),
            global_states=glob.H,
            neighbour_mask=mask,
            se_global=se_g,
            se_local=se_l,
        )

    def forward_batch(self, triples, **kw) -> list[SequenceOutput]:
        return [self.run_sequence(tr, **kw) for tr in triples]

    def logits(self, domain: str, se: Tensor) -> Tensor:
        """Scores over the domain catalogue (MASK row excluded)."""
        n = self.n_items[domain]
        table = ag.take(self.store[f"emb.{domain}"], slice(0, n))
        return table @ se + self.store[f"bias.{domain}"]

    def item_table(self, domain: str) -> Tensor:
        return ag.take(self.store[f"emb.{domain}"], slice(0, self.n_items[domain]))

    def score_heldout(self, triple: SequenceTriple) -> dict:
        """Frozen-model scores for each domain's held-out last item.

        Returns ``{domain: (scores, target)}`` for domains with >= 2 items.
        """
        short, targets = drop_last_per_domain(truncate(triple, self.config.max_len))
        with ag.no_grad():
            out = self.run_sequence(short, collect=False)
            res = {}
            for d, target in targets.items():
                se = out.se[d]
                if se is None:
                    continue
                res[d] = (self.logits(d, se).data.copy(), target)
        return res

    # ------------------------------------------------------------------
    # checkpoint

    def save(self, path, extra: dict | None = None) -> None:
        Path(path).write_bytes(self.to_bytes(extra))

    def to_bytes(self, extra: dict | None = None) -> bytes:
        meta = {
            "config": to_dict(None, self.config)["train"],
            "seed": self.config.seed,
            "n_items": self.n_items,
            "params": [{"name": k, "shape": list(p.shape)} for k, p in self.store.params.items()],
            "extra": extra or {},
        }
        blob = json.dumps(meta, sort_keys=True).encode()
        body = b"".join(p.data.astype("<f8").tobytes() for p in self.store.params.values())
        return CKPT_MAGIC + struct.pack("<Q", len(blob)) + blob + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> tuple["DDGHM", dict]:
        if not raw.startswith(CKPT_MAGIC):
            head = raw[: len(CKPT_MAGIC)].split(b"\n")[0][:40]
            raise CheckpointError(f"unsupported checkpoint header {head!r}; expected DDGHM-CKPT-1")
        off = len(CKPT_MAGIC)
        try:
            (n,) = struct.unpack_from("<Q", raw, off)
            meta = json.loads(raw[off + 8: off + 8 + n])
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from None
        body = raw[off + 8 + n:]
        model = cls(meta["n_items"], train_config_from_dict(meta["config"]))
        names = [p["name"] for p in meta["params"]]
        if names != list(model.store.params):
            raise CheckpointError("checkpoint parameter list does not match the configured model")
        pos = 0
        for spec in meta["params"]:
            shape = tuple(spec["shape"])
            size = int(np.prod(shape)) * 8
            if pos + size > len(body):
                raise CheckpointError("checkpoint truncated")
            model.store.set(spec["name"], np.frombuffer(body[pos: pos + size], dtype="<f8").reshape(shape))
            pos += size
        if pos != len(body):
            raise CheckpointError("trailing bytes after parameters")
        return model, meta.get("extra", {})

    @classmethod
    def load(cls, path) -> tuple["DDGHM", dict]:
        return cls.from_bytes(Path(path).read_bytes())
