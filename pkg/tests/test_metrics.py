import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddghm.data import make_triple
from ddghm.metrics import evaluate, hr_at_k, metric_row, mrr_at_k, ndcg_at_k, rank_ground_truth
from ddghm.synthetic import toy_problem

rank_lists = st.lists(st.integers(1, 60), min_size=1, max_size=50)
ks = st.integers(1, 30)


class OracleScorer:
    """Scores the held-out item highest."""

    def __init__(self, n):
        self.n = n

    def score_heldout(self, tr):
        out = {}
        for d in "AB":
            items = tr.domain(d).items
            if len(items) >= 2:
                s = np.zeros(self.n)
                s[items[-1].item] = 1.0
                out[d] = (s, items[-1].item)
        return out


class RandomScorer:
    def __init__(self, n, seed):
        self.n, self.rng = n, np.random.default_rng(seed)

    def score_heldout(self, tr):
        return {d: (self.rng.random(self.n), tr.domain(d).items[-1].item) for d in "AB" if len(tr.domain(d)) >= 2}


class TestRank:
    def test_unique_max(self):
        assert rank_ground_truth([0.1, 0.9, 0.3], 1) == 1

    def test_uniform_index_tie_break(self):
        assert rank_ground_truth(np.zeros(7), 0) == 1
        assert rank_ground_truth(np.zeros(7), 4) == 5

    def test_against_sort(self, rng):
        for _ in range(50):
            s = rng.integers(0, 4, size=10).astype(float)
            t = int(rng.integers(10))
            order = sorted(range(10), key=lambda i: (-s[i], i))
            assert rank_ground_truth(s, t) == order.index(t) + 1


class TestClosedForm:
    @pytest.mark.parametrize("k", [1, 5, 20])
    def test_rank_one(self, k):
        assert hr_at_k([1], k) == ndcg_at_k([1], k) == mrr_at_k([1], k) == 1.0

    def test_rank_three_k5(self):
        assert hr_at_k([3], 5) == 1.0
        assert ndcg_at_k([3], 5) == 0.5
        assert mrr_at_k([3], 5) == pytest.approx(1 / 3, abs=1e-16)

    def test_rank_three_k2(self):
        assert hr_at_k([3], 2) == ndcg_at_k([3], 2) == mrr_at_k([3], 2) == 0.0

    def test_errors(self):
        with pytest.raises(ValueError):
            hr_at_k([], 5)
        with pytest.raises(ValueError):
            ndcg_at_k([0], 5)
        with pytest.raises(ValueError):
            mrr_at_k([1], 0)


class TestProperties:
    @given(rank_lists, ks)
    def test_ordering(self, ranks, k):
        m, n, h = mrr_at_k(ranks, k), ndcg_at_k(ranks, k), hr_at_k(ranks, k)
        assert m <= n + 1e-15 and n <= h + 1e-15

    @given(rank_lists, ks)
    def test_monotone_in_k(self, ranks, k):
        for f in (hr_at_k, ndcg_at_k, mrr_at_k):
            assert f(ranks, k) <= f(ranks, k + 1)

    @given(st.integers(1, 60), ks)
    def test_monotone_in_rank(self, r, k):
        for f in (hr_at_k, ndcg_at_k, mrr_at_k):
            assert f([r + 1], k) <= f([r], k)

    @given(rank_lists, st.randoms(use_true_random=False))
    def test_permutation_invariance(self, ranks, rnd):
        shuffled = list(ranks)
        rnd.shuffle(shuffled)
        assert metric_row(ranks) == pytest.approx(metric_row(shuffled), abs=1e-15)


class TestEvaluate:
    def test_oracle_model(self):
        rep = evaluate(OracleScorer(6), toy_problem(5, 6, 3))
        assert all(v == 1.0 for row in rep.table.values() for v in row.values())

    def test_random_model_binomial(self):
        C, n = 50, 1200
        triples = toy_problem(n // 2, C, 2, seed=3)
        rep = evaluate(RandomScorer(C, 0), triples)
        hits = sum(rep.table[d]["HR@10"] * rep.counts[d] for d in "AB")
        trials = sum(rep.counts.values())
        p = 10 / C
        assert trials >= 1000
        assert abs(hits / trials - p) <= 3 * math.sqrt(p * (1 - p) / trials)

    def test_skipped(self):
        rep = evaluate(OracleScorer(4), [make_triple(0, [(1, 0)], [(1, 1), (2, 2)])])
        assert rep.skipped == {"A": 1, "B": 0}
        assert set(rep.table) == {"B"}

    def test_reports(self):
        rep = evaluate(OracleScorer(6), toy_problem(3, 6, 3))
        obj = json.loads(rep.to_json())
        assert obj["metrics"]["A"]["HR@20"] == 1.0
        lines = rep.to_tsv().splitlines()
        assert lines[0].split("\t")[:3] == ["domain", "n", "HR@5"]
        assert len(lines) == 3

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(OracleScorer(3), [])
