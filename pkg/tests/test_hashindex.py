import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from a2net import hashindex as hx

codes_st = st.integers(1, 130).flatmap(
    lambda k: st.lists(st.sampled_from([-1, 1]), min_size=k, max_size=k))


def random_codes(m, k, seed=0):
    return np.where(np.random.default_rng(seed).random((m, k)) < 0.5, -1, 1).astype(np.int8)


def test_pack_example_bit_layout():
    assert int(hx.pack([1, -1, 1, 1]).words[0]) == 0b1101 == 13
    assert int(hx.pack([-1] * 64).words[0]) == 0
    c = hx.pack([-1] * 64 + [1])
    assert c.words.tolist() == [0, 1]


@settings(max_examples=100, deadline=None)
@given(codes_st)
def test_pack_roundtrip(u):
    u = np.array(u, dtype=np.int8)
    c = hx.pack(u)
    assert np.array_equal(hx.unpack(c), u)
    k = len(u)
    if k % 64:
        assert int(c.words[-1]) >> (k % 64) == 0  # padding stays clear


def test_pack_rejects_non_sign_entries():
    with pytest.raises(hx.HashIndexError):
        hx.pack([1, 0, -1])


def test_hamming_examples():
    a = hx.pack([1, -1, 1])
    b = hx.pack([1, 1, -1])
    assert hx.hamming(a, a) == 0
    assert hx.hamming(a, b) == 2
    # u.z = k - 2 d
    assert (3 - (-1)) // 2 == hx.hamming(a, b)
    with pytest.raises(hx.HashIndexError):
        hx.hamming(a, hx.pack([1, 1]))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2**31))
def test_hamming_equals_per_bit_count_and_inner_product(k, seed):
    u, z = random_codes(2, k, seed)
    d = hx.hamming(hx.pack(u), hx.pack(z))
    assert d == int(np.sum(u != z))
    assert int(u.astype(int) @ z.astype(int)) == k - 2 * d


def naive_topk(codes, ids, q, K):
    dist = [(int(np.sum(c != q)), int(i)) for c, i in zip(codes, ids)]
    return [(i, d) for d, i in sorted(dist)[:K]]


@pytest.mark.parametrize("seed", range(5))
def test_search_topk_matches_naive_sort(seed):
    rng = np.random.default_rng(seed)
    U = random_codes(200, 16, seed)
    ids = rng.permutation(1000)[:200]
    index = hx.HashIndex.build(U, ids=ids)
    for q in random_codes(5, 16, seed + 100):
        for K in (1, 10, 37, 200, 500):
            assert hx.search_topk(hx.pack(q), index, K) == naive_topk(U, ids, q, K)


def test_self_query_ranks_lowest_duplicate_first():
    U = random_codes(30, 12, 3)
    U[7] = U[20]
    index = hx.HashIndex.build(U)
    top = hx.search_topk(hx.pack(U[20]), index, 2)
    assert top[0] == (7, 0) and top[1] == (20, 0)


def test_search_validates():
    index = hx.HashIndex.build(random_codes(4, 8))
    with pytest.raises(hx.HashIndexError):
        hx.search_topk(hx.pack([1] * 8), index, 0)
    with pytest.raises(hx.HashIndexError):
        hx.search_topk(hx.pack([1] * 9), index, 3)


def test_index_is_immutable():
    index = hx.HashIndex.build(random_codes(4, 8))
    with pytest.raises(ValueError):
        index.codes[0, 0] = 1


def test_index_file_roundtrip(tmp_path):
    U = random_codes(50, 70, 1)
    index = hx.HashIndex.build(U, ids=np.arange(50) * 3, labels=np.arange(50) % 4)
    p1, p2 = tmp_path / "a.idx", tmp_path / "b.idx"
    hx.save(index, p1)
    again = hx.load(p1)
    assert again == index
    hx.save(again, p2)
    assert p1.read_bytes() == p2.read_bytes()
    no_labels = hx.HashIndex.build(U)
    assert hx.HashIndex.frombytes(no_labels.tobytes()) == no_labels


def test_index_header_layout():
    raw = hx.HashIndex.build(random_codes(2, 12), ids=[5, 9]).tobytes()
    assert raw[:4] == b"A2HX"
    assert len(raw) == 4 + 4 + 4 + 8 + 2 * 16 + 1
    assert int.from_bytes(raw[20:28], "little") == 5


@pytest.mark.parametrize("mutate", ["magic", "version", "truncate", "trailing", "padding"])
def test_corrupt_index_rejected(mutate):
    raw = bytearray(hx.HashIndex.build(random_codes(3, 12)).tobytes())
    if mutate == "magic":
        raw[:4] = b"XXXX"
    elif mutate == "version":
        raw[4] = 9
    elif mutate == "truncate":
        raw = raw[:-5]
    elif mutate == "trailing":
        raw += b"\x00"
    elif mutate == "padding":
        raw[20 + 8 + 7] = 0xFF  # high byte of the first code word
    with pytest.raises(hx.HashIndexError):
        hx.HashIndex.frombytes(bytes(raw))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 100), st.integers(0, 2**31))
def test_metric_axioms(k, seed):
    a, b, c = (hx.pack(u) for u in random_codes(3, k, seed))
    assert hx.hamming(a, b) == hx.hamming(b, a)
    assert 0 <= hx.hamming(a, b) <= k
    assert hx.hamming(a, c) <= hx.hamming(a, b) + hx.hamming(b, c)
