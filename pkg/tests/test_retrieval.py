import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hashta.fingerprint import fingerprint_batch, new_hash_family, simhash
from hashta.retrieval import (
    category_hard_search,
    hamming_top_k_batch,
    recall_at_k,
    top_k_by_dot,
    top_k_by_hamming,
)


def brute_hamming_order(query, table, mask):
    """Full sort oracle: (distance asc, position desc), valid only."""
    dists = [
        int(np.bitwise_count(table.words[i] ^ query.words).sum())
        for i in range(len(table))
    ]
    order = sorted(
        (i for i in range(len(table)) if mask[i]),
        key=lambda i: (dists[i], -i),
    )
    return order, dists


def random_instance(seed, length, dim=6, m=16, rounds=2, mask_p=0.9):
    rng = np.random.default_rng(seed)
    fam = new_hash_family(dim, m, rounds, seed=seed % 1000)
    embs = rng.standard_normal((length, dim))
    table = fingerprint_batch(embs, fam)
    query = simhash(rng.standard_normal(dim), fam)
    mask = rng.random(length) < mask_p
    return query, table, mask, embs


# ---------------------------------------------------------------------------
# hamming top-k


@given(st.integers(0, 2**32 - 1), st.integers(1, 64), st.integers(1, 70))
@settings(max_examples=60, deadline=None)
def test_hamming_top_k_matches_sort_oracle(seed, length, k):
    query, table, mask, _ = random_instance(seed, length)
    res = top_k_by_hamming(query, table, mask, k)
    order, dists = brute_hamming_order(query, table, mask)
    expect = order[: min(k, len(order))]
    assert res.indices.tolist() == expect
    assert res.scores.tolist() == [dists[i] for i in expect]
    assert res.n_valid == int(mask.sum())
    assert res.k_requested == k


def test_tie_break_prefers_recency():
    # duplicate fingerprints at many positions force distance ties
    fam = new_hash_family(4, 8, 1, seed=0)
    v = np.array([1.0, -1.0, 0.5, 2.0])
    embs = np.stack([v, v * 2.0, -v, v * 0.5, -v * 3.0])  # dup signs
    table = fingerprint_batch(embs, fam)
    res = top_k_by_hamming(simhash(v, fam), table, np.ones(5, bool), 3)
    # positions 0, 1, 3 all at distance 0: most recent (largest) first
    assert res.indices.tolist() == [3, 1, 0]
    assert res.scores.tolist() == [0, 0, 0]


def test_masked_positions_never_selected():
    query, table, mask, _ = random_instance(3, 40, mask_p=0.5)
    res = top_k_by_hamming(query, table, mask, 40)
    assert all(mask[i] for i in res.indices)
    assert len(res) == int(mask.sum())


def test_saturated_k_returns_all_valid_ascending_quality():
    query, table, mask, _ = random_instance(5, 12, mask_p=1.0)
    res = top_k_by_hamming(query, table, mask, 100)
    assert sorted(res.indices.tolist()) == list(range(12))
    assert all(a <= b for a, b in zip(res.scores, res.scores[1:]))


def test_all_masked_gives_empty_result():
    query, table, _, _ = random_instance(8, 10)
    res = top_k_by_hamming(query, table, np.zeros(10, bool), 4)
    assert len(res) == 0 and res.n_valid == 0


def test_sequence_of_fingerprints_accepted():
    query, table, mask, _ = random_instance(9, 10)
    fps = [table.row(i) for i in range(10)]
    a = top_k_by_hamming(query, table, mask, 5)
    b = top_k_by_hamming(query, fps, mask, 5)
    assert a.indices.tolist() == b.indices.tolist()


def test_invalid_args_rejected():
    query, table, mask, _ = random_instance(1, 10)
    with pytest.raises(ValueError):
        top_k_by_hamming(query, table, mask, 0)
    with pytest.raises(ValueError):
        top_k_by_hamming(query, table, np.ones(9, bool), 3)
    other = simhash(np.zeros(6), new_hash_family(6, 16, 3, seed=0))
    with pytest.raises(ValueError):
        top_k_by_hamming(other, table, mask, 3)


# ---------------------------------------------------------------------------
# batch


@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 50), st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_batch_rows_equal_single_queries(seed, length, k, n_queries):
    rng = np.random.default_rng(seed)
    fam = new_hash_family(5, 24, 2, seed=3)
    keys = fingerprint_batch(rng.standard_normal((length, 5)), fam)
    queries = fingerprint_batch(rng.standard_normal((n_queries, 5)), fam)
    mask = rng.random(length) < 0.85
    idx, dists = hamming_top_k_batch(queries, keys, mask, k)
    for row in range(n_queries):
        single = top_k_by_hamming(queries.row(row), keys, mask, k)
        assert idx[row].tolist() == single.indices.tolist()
        assert dists[row].tolist() == single.scores.tolist()


def test_batch_all_masked():
    fam = new_hash_family(4, 16, 1, seed=0)
    keys = fingerprint_batch(np.ones((6, 4)), fam)
    queries = fingerprint_batch(np.ones((3, 4)), fam)
    idx, dists = hamming_top_k_batch(queries, keys, np.zeros(6, bool), 4)
    assert idx.shape == (3, 0) and dists.shape == (3, 0)


# ---------------------------------------------------------------------------
# dot / angular baseline


def brute_dot_order(scores, mask):
    return sorted((i for i in range(len(scores)) if mask[i]), key=lambda i: (-scores[i], -i))


@given(st.integers(0, 2**32 - 1), st.integers(1, 50), st.integers(1, 60))
@settings(max_examples=40, deadline=None)
def test_dot_top_k_matches_sort_oracle(seed, length, k):
    rng = np.random.default_rng(seed)
    keys = rng.standard_normal((length, 4))
    q = rng.standard_normal(4)
    mask = rng.random(length) < 0.9
    res = top_k_by_dot(q, keys, mask, k)
    expect = brute_dot_order(keys @ q, mask)[: min(k, int(mask.sum()))]
    assert res.indices.tolist() == expect


def test_dot_tie_break_prefers_recency():
    keys = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    res = top_k_by_dot(np.array([1.0, 0.0]), keys, np.ones(3, bool), 2)
    assert res.indices.tolist() == [2, 0]


def test_angular_ignores_key_scale():
    rng = np.random.default_rng(4)
    keys = rng.standard_normal((20, 3))
    scales = rng.uniform(0.1, 10.0, size=20)[:, None]
    q = rng.standard_normal(3)
    mask = np.ones(20, bool)
    a = top_k_by_dot(q, keys, mask, 7, metric="angular")
    b = top_k_by_dot(q, keys * scales, mask, 7, metric="angular")
    assert a.indices.tolist() == b.indices.tolist()


def test_angular_zero_norm_key_ranks_last():
    keys = np.array([[0.0, 0.0], [0.2, 0.1], [-1.0, -1.0]])
    res = top_k_by_dot(np.array([1.0, 1.0]), keys, np.ones(3, bool), 3, metric="angular")
    assert res.indices.tolist()[-1] == 0
    assert res.scores[-1] == -np.inf


def test_angular_zero_norm_query_rejected():
    with pytest.raises(ValueError):
        top_k_by_dot(np.zeros(2), np.ones((3, 2)), np.ones(3, bool), 1, metric="angular")
    with pytest.raises(ValueError):
        top_k_by_dot(np.ones(2), np.ones((3, 2)), np.ones(3, bool), 1, metric="bogus")


# ---------------------------------------------------------------------------
# category hard search


def test_hard_search_matches_then_backfills():
    cats = np.array([5, 2, 5, 3, 5, 2])
    res = category_hard_search(5, cats, np.ones(6, bool), 4)
    # matches by recency: 4, 2, 0; then backfill with most recent other: 5
    assert res.indices.tolist() == [4, 2, 0, 5]
    assert res.scores.tolist() == [1.0, 1.0, 1.0, 0.0]


def test_hard_search_respects_mask():
    cats = np.array([5, 5, 5, 5])
    mask = np.array([True, False, True, False])
    res = category_hard_search(5, cats, mask, 4)
    assert res.indices.tolist() == [2, 0]


def test_hard_search_no_matches_is_pure_recency():
    cats = np.array([1, 2, 3, 4])
    res = category_hard_search(9, cats, np.ones(4, bool), 3)
    assert res.indices.tolist() == [3, 2, 1]
    assert res.scores.tolist() == [0.0, 0.0, 0.0]


@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 50))
@settings(max_examples=30, deadline=None)
def test_hard_search_matches_sort_oracle(seed, length, k):
    rng = np.random.default_rng(seed)
    cats = rng.integers(1, 5, size=length)
    mask = rng.random(length) < 0.85
    target = int(rng.integers(1, 5))
    res = category_hard_search(target, cats, mask, k)
    order = sorted(
        (i for i in range(length) if mask[i]),
        key=lambda i: (0 if cats[i] == target else 1, -i),
    )
    assert res.indices.tolist() == order[: min(k, int(mask.sum()))]


# ---------------------------------------------------------------------------
# recall


def test_recall_values():
    assert recall_at_k([1, 2, 3], [2, 3, 4]) == pytest.approx(2 / 3)
    assert recall_at_k([1, 2], [1, 2]) == 1.0
    assert recall_at_k([5], [1, 2]) == 0.0
    with pytest.raises(ValueError):
        recall_at_k([1], [])
    with pytest.raises(ValueError):
        recall_at_k([], [1])


def test_hamming_recall_of_angular_improves_with_bits():
    # more hash bits -> hamming ranking tracks the cosine ranking better
    rng = np.random.default_rng(11)
    dim, length, k = 16, 128, 16
    mean_recall = {}
    for m in (8, 256):
        recalls = []
        for trial in range(20):
            embs = rng.standard_normal((length, dim))
            q = rng.standard_normal(dim)
            fam = new_hash_family(dim, m, 2, seed=trial)
            table = fingerprint_batch(embs, fam)
            mask = np.ones(length, bool)
            approx = top_k_by_hamming(simhash(q, fam), table, mask, k)
            exact = top_k_by_dot(q, embs, mask, k, metric="angular")
            recalls.append(recall_at_k(approx.indices, exact.indices))
        mean_recall[m] = float(np.mean(recalls))
    assert mean_recall[256] > mean_recall[8] + 0.1
    assert mean_recall[256] > 0.5
