import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddghm import autograd as ag
from ddghm.autograd import ParameterStore, Tensor
from ddghm.gate import (
    GATE_NAMES,
    TransferContext,
    add_gate_params,
    apply_gate,
    gru_fuse,
    neighbour_attentive,
    self_attentive,
    sequence_fusion,
)

D = 3

# values produced by the independent oracles below, then frozen
FROZEN_NEIGHBOUR_WEIGHTS = [0.695901987224504, 0.14409461766794066, 0.16000339510755526]
FROZEN_GATE_OUTPUT = [
    [0.16616630523733195, -0.15077720315054705, -0.07967631830923762],
    [0.13842483840833936, 0.020347783535648048, -0.12316154809089594],
]


def gate_store(seed=0, d=D, plain=False):
    s = ParameterStore(seed)
    add_gate_params(s, "g", d, plain=plain)
    return s


def zero(s, names=GATE_NAMES):
    for n in names:
        s.set(f"g.{n}", np.zeros(s[f"g.{n}"].shape))


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def oracle_gate(P, h_l, h_g, G, mask, se_g, se_l):
    """Node-by-node evaluation of the whole gate."""
    d = h_l.shape[1]
    W_att = (P["W_gen"] @ np.concatenate([se_g, se_l]) + P["b_gen"]).reshape(d, d)
    out = []
    for x in range(h_l.shape[0]):
        own = P["W_self"] @ h_l[x]
        a_l = P["v"] @ sig(W_att @ h_l[x] + own)
        a_g = P["v"] @ sig(W_att @ h_g[x] + own)
        h_t = a_l * h_l[x] + a_g * h_g[x]
        idx = np.flatnonzero(mask[x])
        h_hat = np.zeros(d)
        if len(idx):
            sc = np.array([(P["W_nei"] @ h_l[x]) @ G[i] for i in idx])
            w = np.exp(sc - sc.max())
            w /= w.sum()
            h_hat = sum(wi * (W_att @ G[i]) for wi, i in zip(w, idx))
        cat = np.concatenate([h_hat, h_t])
        z = sig(P["W_gz"] @ cat)
        r = sig(P["W_gr"] @ cat)
        c = np.tanh(P["W_gh"] @ np.concatenate([h_hat, r * h_t]))
        out.append((1 - z) * h_t + z * c)
    return np.array(out)


def toy_context(seed=0, n_local=2, n_global=4):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(n_global, D))
    mask = np.zeros((n_local, n_global), dtype=bool)
    mask[0, [1]] = True
    if n_local > 1:
        mask[1, [1, 3]] = True
    return TransferContext(
        nodes=list(range(n_local)),
        h_local=Tensor(rng.normal(size=(n_local, D))),
        h_global=Tensor(G[[0, 2]][:n_local]),
        global_states=Tensor(G),
        neighbour_mask=mask,
        se_global=Tensor(rng.normal(size=D)),
        se_local=Tensor(rng.normal(size=D)),
    )


class TestSequenceFusion:
    def test_zero_generator(self, rng):
        s = gate_store()
        s.set("g.W_gen", np.zeros((D * D, 2 * D)))
        W = sequence_fusion(Tensor(rng.normal(size=D)), Tensor(rng.normal(size=D)), s, "g").data
        np.testing.assert_array_equal(W, s["g.b_gen"].data.reshape(D, D))

    def test_zero_inputs(self):
        s = gate_store()
        W = sequence_fusion(Tensor(np.zeros(D)), Tensor(np.zeros(D)), s, "g").data
        np.testing.assert_array_equal(W, s["g.b_gen"].data.reshape(D, D))

    def test_oracle(self):
        s = gate_store(3)
        g, l = np.array([0.1, -0.2, 0.3]), np.array([0.5, 0.0, -0.4])
        want = np.zeros((D, D))
        Wg, b = s["g.W_gen"].data, s["g.b_gen"].data
        x = np.concatenate([g, l])
        for r in range(D):
            for c in range(D):
                want[r, c] = sum(Wg[r * D + c, k] * x[k] for k in range(2 * D)) + b[r * D + c]
        np.testing.assert_allclose(sequence_fusion(Tensor(g), Tensor(l), s, "g").data, want, atol=1e-15)


class TestSelfAttentive:
    def test_zero_v(self, rng):
        s = gate_store()
        s.set("g.v", np.zeros(D))
        out = self_attentive(Tensor(rng.normal(size=(2, D))), Tensor(rng.normal(size=(2, D))), Tensor(rng.normal(size=(D, D))), s, "g")
        assert np.all(out.data == 0)

    def test_symmetric_inputs(self, rng):
        s = gate_store()
        h = rng.normal(size=(1, D))
        W = rng.normal(size=(D, D))
        alpha = s["g.v"].data @ sig(W @ h[0] + s["g.W_self"].data @ h[0])
        out = self_attentive(Tensor(h), Tensor(h), Tensor(W), s, "g").data
        np.testing.assert_allclose(out[0], 2 * alpha * h[0], atol=1e-15)


class TestNeighbourAttentive:
    def test_single_neighbour(self, rng):
        s = gate_store()
        G = rng.normal(size=(3, D))
        W = rng.normal(size=(D, D))
        h_hat, w, iso = neighbour_attentive(Tensor(rng.normal(size=(1, D))), Tensor(G), np.array([[False, True, False]]), Tensor(W), s, "g")
        assert w.data[0].tolist() == [0.0, 1.0, 0.0]
        np.testing.assert_allclose(h_hat.data[0], W @ G[1], atol=1e-15)
        assert not iso[0]

    def test_identical_neighbours(self, rng):
        s = gate_store()
        g = rng.normal(size=D)
        _, w, _ = neighbour_attentive(Tensor(rng.normal(size=(1, D))), Tensor(np.stack([g, g])), np.ones((1, 2), bool), Tensor(np.eye(D)), s, "g")
        np.testing.assert_allclose(w.data[0], [0.5, 0.5], atol=1e-15)

    def test_three_neighbours(self):
        s = gate_store(8)
        rng = np.random.default_rng(21)
        h, G = rng.normal(size=D), rng.normal(size=(3, D))
        _, w, _ = neighbour_attentive(Tensor(h[None]), Tensor(G), np.ones((1, 3), bool), Tensor(np.eye(D)), s, "g")
        Wn = s["g.W_nei"].data
        scores = [sum((Wn @ h)[k] * G[i, k] for k in range(D)) for i in range(3)]
        e = np.exp(scores)
        np.testing.assert_allclose(w.data[0], e / e.sum(), atol=1e-15)
        # frozen from the brute-force softmax above
        np.testing.assert_allclose(w.data[0], FROZEN_NEIGHBOUR_WEIGHTS, atol=1e-12)

    def test_isolated(self, rng):
        s = gate_store()
        h_hat, w, iso = neighbour_attentive(Tensor(rng.normal(size=(1, D))), Tensor(rng.normal(size=(2, D))), np.zeros((1, 2), bool), Tensor(np.eye(D)), s, "g")
        assert iso[0] and np.all(h_hat.data == 0) and np.all(w.data == 0)

    @given(st.integers(0, 10_000), st.integers(1, 6))
    def test_weights_are_distribution(self, seed, n):
        rng = np.random.default_rng(seed)
        s = gate_store(seed)
        mask = rng.random((3, n)) < 0.6
        mask[:, 0] = True
        _, w, _ = neighbour_attentive(Tensor(rng.normal(size=(3, D)) * 5), Tensor(rng.normal(size=(n, D)) * 5), mask, Tensor(np.eye(D)), s, "g")
        assert np.all(w.data >= 0) and np.all(w.data[~mask] == 0)
        assert np.all(np.abs(w.data.sum(axis=1) - 1) <= 1e-12)


class TestGRUFuse:
    def test_zero_weights_halve(self, rng):
        s = gate_store()
        zero(s, ("W_gz", "W_gr", "W_gh"))
        h_t = rng.normal(size=(2, D))
        out = gru_fuse(Tensor(rng.normal(size=(2, D))), Tensor(h_t), s, "g").data
        np.testing.assert_allclose(out, 0.5 * h_t, atol=1e-15)

    def test_closed_gate(self):
        s = gate_store()
        s.set("g.W_gz", -1000 * np.ones((D, 2 * D)))
        h_t = np.array([[0.4, 0.2, 0.9]])
        out = gru_fuse(Tensor(np.ones((1, D))), Tensor(h_t), s, "g").data
        np.testing.assert_allclose(out, h_t, atol=1e-12)

    @given(st.integers(0, 10_000))
    def test_between_inputs(self, seed):
        rng = np.random.default_rng(seed)
        s = gate_store(seed)
        h_hat, h_t = rng.normal(size=(4, D)), rng.normal(size=(4, D)) * 3
        out = gru_fuse(Tensor(h_hat), Tensor(h_t), s, "g").data
        r = sig(np.concatenate([h_hat, h_t], 1) @ s["g.W_gr"].data.T)
        cand = np.tanh(np.concatenate([h_hat, r * h_t], 1) @ s["g.W_gh"].data.T)
        lo, hi = np.minimum(h_t, cand), np.maximum(h_t, cand)
        assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


class TestApplyGate:
    def test_oracle(self):
        s = gate_store(5)
        ctx = toy_context(2)
        P = {k: s[f"g.{k}"].data for k in GATE_NAMES}
        want = oracle_gate(P, ctx.h_local.data, ctx.h_global.data, ctx.global_states.data, ctx.neighbour_mask, ctx.se_global.data, ctx.se_local.data)
        got = apply_gate(ctx, s, "g").data
        np.testing.assert_allclose(got, want, atol=1e-14)
        # frozen from the node-by-node oracle
        np.testing.assert_allclose(got, FROZEN_GATE_OUTPUT, atol=1e-12)

    def test_empty_transfer(self):
        ctx = toy_context()
        ctx = TransferContext([], Tensor(np.zeros((0, D))), Tensor(np.zeros((0, D))), ctx.global_states, np.zeros((0, 4), bool), ctx.se_global, ctx.se_local)
        assert apply_gate(ctx, gate_store(), "g") is ctx.h_local

    def test_half_scaling(self):
        # zero gate except a v summing to one, with equal local and global states
        s = gate_store()
        zero(s)
        s.set("g.v", np.array([0.2, 0.3, 0.5]))
        ctx = toy_context(4)
        ctx.h_global = ctx.h_local
        np.testing.assert_allclose(apply_gate(ctx, s, "g").data, 0.5 * ctx.h_local.data, atol=1e-15)

    def test_all_zero_collapses(self):
        s = gate_store()
        zero(s)
        assert np.all(apply_gate(toy_context(), s, "g").data == 0)

    def test_plain_gate_is_bare_gru(self):
        s = gate_store(plain=True)
        assert set(s.params) == {"g.W_gz", "g.W_gr", "g.W_gh"}
        ctx = toy_context()
        want = gru_fuse(ctx.h_global, ctx.h_local, s, "g").data
        np.testing.assert_array_equal(apply_gate(ctx, s, "g", plain=True).data, want)

    def test_gradients(self):
        s = gate_store(6)
        ctx0 = toy_context(3)
        s.add("hl", (2, D))
        s.add("G", (4, D))
        s.add("se", (2, D))

        def f(st_):
            ctx = TransferContext(
                [0, 1], st_["hl"], ag.take(st_["G"], np.array([0, 2])), st_["G"], ctx0.neighbour_mask,
                st_["se"][0], st_["se"][1],
            )
            return ag.reduce_sum(ag.tanh(apply_gate(ctx, st_, "g")))

        assert ag.grad_check(f, s) < 1e-4
