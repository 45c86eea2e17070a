import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedcase.errors import DegenerateRankingError, RankingMismatchError
from fedcase.metrics import assign_relevance, dcg, evaluate_ranking, f1_score, ndcg, severity_ground_truth

from oracles import dcg_oracle, ndcg_oracle, relevance_oracle


class TestF1:
    @pytest.mark.parametrize("pred,true,expected", [
        ([1, 1, 0, 0], [1, 0, 1, 0], 0.5),
        ([1, 1, 1], [1, 1, 1], 1.0),
        ([0, 0], [1, 1], 0.0),
        ([0, 0], [0, 0], 0.0),
        ([1, 1, 1, 1], [1, 0, 0, 0], 0.4),
    ])
    def test_examples(self, pred, true, expected):
        assert f1_score(pred, true) == pytest.approx(expected, abs=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            f1_score([1, 0], [1])

    def test_empty(self):
        with pytest.raises(ValueError):
            f1_score([], [])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60), st.randoms())
    def test_permutation_invariant(self, pairs, rnd):
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        p, t = zip(*pairs)
        sp, st_ = zip(*shuffled)
        assert f1_score(p, t) == f1_score(sp, st_)
        assert 0.0 <= f1_score(p, t) <= 1.0


class TestRelevance:
    @pytest.mark.parametrize("p", [2, 3, 5, 9, 17, 100])
    def test_endpoints(self, p):
        assert assign_relevance(1, p) == 5 and assign_relevance(p, p) == 1

    def test_p9_is_linear(self):
        assert [assign_relevance(r, 9) for r in range(1, 10)] == [5, 5, 4, 4, 3, 3, 2, 2, 1]

    @pytest.mark.parametrize("p", range(2, 40))
    def test_monotone_and_matches_formula(self, p):
        rels = [assign_relevance(r, p) for r in range(1, p + 1)]
        assert rels == sorted(rels, reverse=True)
        assert rels == [relevance_oracle(r, p) for r in range(1, p + 1)]

    def test_p_below_two(self):
        with pytest.raises(DegenerateRankingError):
            assign_relevance(1, 1)

    def test_rank_out_of_range(self):
        with pytest.raises(ValueError):
            assign_relevance(0, 9)


class TestDcg:
    def test_examples(self):
        assert dcg([0, 0, 0]) == 0.0
        assert dcg([5]) == 31.0
        assert dcg([1, 1]) == pytest.approx(1.0 + 1.0 / math.log2(3), abs=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError):
            dcg([])


class TestNdcg:
    def test_reversed_p3(self):
        assert abs(ndcg(["c", "b", "a"], ["a", "b", "c"]) - 0.5823647475653753) < 1e-12

    def test_ideal_is_one(self):
        order = list(range(9))
        assert ndcg(order, order) == 1.0

    def test_adjacent_swap_toward_ideal_never_decreases(self):
        rng = np.random.default_rng(0)
        gt = list(range(9))
        for _ in range(200):
            m = list(rng.permutation(9))
            i = int(rng.integers(8))
            if m[i] > m[i + 1]:
                better = m[:]
                better[i], better[i + 1] = better[i + 1], better[i]
                assert ndcg(better, gt) >= ndcg(m, gt)

    def test_all_permutations_p3(self):
        gt = [10, 20, 30]
        for perm in itertools.permutations(gt):
            assert abs(ndcg(list(perm), gt) - ndcg_oracle(list(perm), gt)) < 1e-12

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 12).flatmap(lambda p: st.permutations(list(range(p)))))
    def test_against_oracle(self, perm):
        gt = list(range(len(perm)))
        v = ndcg(perm, gt)
        assert abs(v - ndcg_oracle(perm, gt)) < 1e-12
        assert 0.0 < v <= 1.0

    def test_eval_record(self):
        r = evaluate_ranking([3, 1, 2], [1, 2, 3], query_id=4)
        assert r.relevances == [1, 5, 3] and r.query_id == 4
        assert r.dcg == pytest.approx(dcg_oracle([1, 5, 3]), abs=1e-12)
        assert r.ndcg == r.dcg / r.idcg

    def test_not_a_permutation(self):
        with pytest.raises(RankingMismatchError):
            ndcg([1, 2, 4], [1, 2, 3])

    def test_length_mismatch(self):
        with pytest.raises(RankingMismatchError):
            ndcg([1, 2], [1, 2, 3])
        with pytest.raises(RankingMismatchError):
            ndcg([1, 2, 3], [1, 2, 3], p=9)

    def test_duplicate_ground_truth(self):
        with pytest.raises(RankingMismatchError):
            ndcg([1, 1, 2], [1, 1, 2])

    def test_single_item(self):
        with pytest.raises(DegenerateRankingError):
            ndcg([1], [1])


class TestSeverityGroundTruth:
    def test_order_by_distance(self):
        assert severity_ground_truth(0.5, [(1, 0.9), (2, 0.45), (3, 0.0)]) == [2, 1, 3]

    def test_ties_by_id(self):
        assert severity_ground_truth(0.5, [(9, 0.25), (4, 0.75), (7, 0.5)]) == [7, 4, 9]

    def test_negative_query(self):
        assert severity_ground_truth(0.0, [(2, 0.0), (1, 0.0), (3, 0.3)]) == [1, 2, 3]
