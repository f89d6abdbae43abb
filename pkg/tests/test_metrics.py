import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from a2net import metrics as mt
from a2net.hashindex import HashIndex, pack, search_topk


def brute_ap(rel):
    hits, total = 0, 0.0
    for r, x in enumerate(rel, start=1):
        if x:
            hits += 1
            total += hits / r
    return total / hits if hits else 0.0


def test_ap_examples():
    assert mt.average_precision([1, 0, 1]) == pytest.approx((1 + 2 / 3) / 2)
    assert mt.average_precision([0, 0, 0]) == 0.0
    assert mt.average_precision([1, 1, 1]) == 1.0
    # normalised by total relevant when some fall outside the list
    assert mt.average_precision([1, 0], n_relevant=2) == 0.5


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=60))
def test_ap_matches_brute_force(rel):
    assert mt.average_precision(rel) == pytest.approx(brute_ap(rel), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=40))
def test_ap_bounds_and_perfect_order(rel):
    ap = mt.average_precision(rel)
    assert 0.0 <= ap <= 1.0
    assert mt.average_precision(sorted(rel, reverse=True)) >= ap - 1e-12


def test_precision_at_k():
    assert mt.precision_at_k([1, 0, 1, 1], 2) == 0.5
    assert mt.precision_at_k([1], 4) == 0.25
    with pytest.raises(ValueError):
        mt.precision_at_k([1], 0)


def test_ndcg_fixture():
    # DCG = 1/log2(3), ideal = 1/log2(2) = 1
    assert mt.ndcg([0, 1], 2) == pytest.approx(1 / math.log2(3), abs=1e-12)
    assert abs(mt.ndcg([0, 1], 2) - 0.63093) <= 1e-5
    assert mt.ndcg([0, 0, 0], 3) == 0.0
    assert mt.ndcg([1, 0.5, 0], 3) == pytest.approx(1.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.integers(1, 40))
def test_ndcg_bounded(rel, k):
    v = mt.ndcg(rel, k)
    assert 0.0 <= v <= 1.0 + 1e-12
    assert mt.ndcg(sorted(rel, reverse=True), k) == pytest.approx(1.0 if max(rel) > 0 else 0.0)


def test_ndcg_rejects_out_of_range():
    with pytest.raises(ValueError):
        mt.ndcg([1.5], 1)


def test_attribute_relevance():
    assert mt.attribute_relevance({"a", "b", "c", "d"}, {"a", "b", "c"}) == 0.75
    assert mt.attribute_relevance({1}, {2}) == 0.0
    with pytest.raises(ValueError):
        mt.attribute_relevance(set(), {1})


def test_zero_shot_split():
    seen, unseen = mt.zero_shot_split(list(range(10)), ratio=0.5, seed=3)
    assert len(seen) == 5 and not set(seen) & set(unseen)
    assert sorted(seen + unseen) == list(range(10))
    assert mt.zero_shot_split(list(range(10)), 0.5, 3) == (seen, unseen)
    with pytest.raises(ValueError):
        mt.zero_shot_split([1], 0.5)


def test_similarity_matrix():
    assert mt.similarity_matrix([3], [3, 5]).tolist() == [[1, -1]]
    assert mt.similarity_matrix([{1, 4}], [{4, 9}, {2}], multi_label=True).tolist() == [[1, -1]]
    with pytest.raises(ValueError):
        mt.similarity_matrix([set()], [{1}], multi_label=True)


def oracle_map(Q, D, lq, ld, db_ids):
    aps = []
    for q, l in zip(Q, lq):
        dist = [(int(np.sum(q != d)), int(i), int(lab == l)) for d, i, lab in zip(D, db_ids, ld)]
        dist.sort()
        aps.append(brute_ap([r for _, _, r in dist]))
    return sum(aps) / len(aps)


@pytest.mark.parametrize("seed", range(3))
def test_retrieval_map_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    D = np.where(rng.random((120, 16)) < 0.5, -1, 1)
    Q = np.where(rng.random((10, 16)) < 0.5, -1, 1)
    ld, lq = rng.integers(0, 4, 120), rng.integers(0, 4, 10)
    ids = rng.permutation(120)
    got = mt.retrieval_map(Q, D, lq, ld, db_ids=ids, exclude_self=False)
    assert got == pytest.approx(oracle_map(Q, D, lq, ld, ids), abs=1e-12)


def test_rankings_agree_with_topk():
    rng = np.random.default_rng(9)
    D = np.where(rng.random((50, 12)) < 0.5, -1, 1)
    q = D[4]
    (order, dist), = mt.rankings(q[None], D, exclude_self=False)
    top = search_topk(pack(q), HashIndex.build(D), 50)
    assert [i for i, _ in top] == order.tolist()
    assert [d for _, d in top] == dist.tolist()


def test_exclude_self():
    D = np.array([[1, 1], [1, -1], [-1, -1]])
    (order, _), = mt.rankings(D[:1], D, db_ids=[10, 11, 12], query_ids=[10])
    assert order.tolist() == [1, 2]


def test_retrieval_ndcg_perfect_when_codes_follow_attributes():
    attrs = [{0}, {0}, {1}, {1}]
    D = np.array([[1, 1], [1, 1], [-1, -1], [-1, -1]])
    v = mt.retrieval_ndcg(D, D, attrs, attrs, k=2, db_ids=[0, 1, 2, 3], query_ids=[0, 1, 2, 3])
    assert v == pytest.approx(1.0)
