import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from debiasvae.bias_extract import (
    bias_scores,
    dump_scores,
    extract_extreme_sets,
    matching_score,
    popularity_score,
    score_rows,
    user_category_vector,
)
from debiasvae.dataset import Dataset


def make_dataset(counts, cats):
    counts = np.asarray(counts, dtype=np.int64)
    cats = np.asarray(cats, dtype=np.float64)
    n = len(counts)
    mat = sp.csr_matrix((1, n), dtype=np.float32)
    return Dataset(mat, ("u",), tuple(str(i) for i in range(n)), cats,
                   tuple(f"c{j}" for j in range(cats.shape[1])), counts)


def test_popularity_single_item():
    ds = make_dataset([7, 1], [[1, 0], [0, 1]])
    assert popularity_score(ds, [0], 0) == 1.0


def test_popularity_two_items():
    ds = make_dataset([3, 1], [[1, 0], [0, 1]])
    assert popularity_score(ds, [0, 1], 0) == 0.75


def test_popularity_scale_invariant():
    a = make_dataset([3, 1, 5], np.eye(3))
    b = make_dataset([30, 10, 50], np.eye(3))
    for i in range(3):
        assert popularity_score(a, [0, 1, 2], i) == pytest.approx(popularity_score(b, [0, 1, 2], i), abs=1e-15)


def test_popularity_item_outside_profile():
    ds = make_dataset([3, 1], [[1, 0], [0, 1]])
    with pytest.raises(KeyError):
        popularity_score(ds, [0], 1)


def test_popularity_zero_denominator():
    ds = make_dataset([0, 0], [[1, 0], [0, 1]])
    assert popularity_score(ds, [0, 1], 0) == 0.0


def test_user_category_vector():
    ds = make_dataset([1, 1], [[1, 0], [1, 1]])
    assert user_category_vector(ds, []).tolist() == [0, 0]
    assert user_category_vector(ds, [0, 1]).tolist() == [2, 1]


def test_matching_examples():
    assert matching_score([1, 0], [2, 1]) == pytest.approx(2 / np.sqrt(5), abs=1e-12)
    assert matching_score([1, 0], [0, 3]) == 0.0
    assert matching_score([1, 0], [0, 0]) == 0.0
    assert matching_score([1, 1], [2, 1]) == pytest.approx(matching_score([1, 1], [6, 3]), abs=1e-15)
    with pytest.raises(ValueError):
        matching_score([1, 0, 0], [1, 0])


def test_k_zero_gives_empty_sets():
    ds = make_dataset([5, 1, 3, 2], np.eye(4))
    ex = extract_extreme_sets(ds, [0, 1, 2, 3], 0.0)
    assert ex.x_p == frozenset() and ex.x_m == frozenset()


def test_opposite_rankings_four_items():
    # popularity order 0 > 1 > 2 > 3; category overlap order 3 > 2 > 1 > 0
    counts = [40, 30, 20, 10]
    cats = [[0, 0, 0, 1], [0, 0, 1, 1], [0, 1, 1, 1], [1, 1, 1, 1]]
    ds = make_dataset(counts, cats)
    sc = bias_scores(ds, [0, 1, 2, 3])
    assert sc.rank_p.tolist() == [1, 2, 3, 4]
    assert sc.rank_m.tolist() == [4, 3, 2, 1]
    ex = extract_extreme_sets(ds, [0, 1, 2, 3], 0.5)
    assert ex.x_p == {0}
    assert ex.x_m == {3}


def test_ties_break_by_item_index():
    ds = make_dataset([2, 2, 2], np.eye(3))
    sc = bias_scores(ds, [2, 0, 1])
    assert sc.rank_p.tolist() == [1, 2, 3]
    assert sc.rank_m.tolist() == [1, 2, 3]


def test_invalid_k():
    ds = make_dataset([1, 1], np.eye(2))
    with pytest.raises(ValueError):
        extract_extreme_sets(ds, [0, 1], 1.5)


def _literal(counts, cats, profile, k):
    """Direct reading of the two set definitions, no vectorisation."""
    profile = sorted(set(profile))
    total = sum(counts[i] for i in profile)
    s_p = {i: (counts[i] / total if total else 0.0) for i in profile}
    d_u = [sum(cats[i][c] for i in profile) for c in range(len(cats[0]))]
    norm = sum(v * v for v in d_u) ** 0.5
    s_m = {i: (sum(a * b for a, b in zip(cats[i], d_u)) / norm if norm else 0.0) for i in profile}

    def rank(scores):
        ordered = sorted(profile, key=lambda i: (-scores[i], i))
        return {i: r + 1 for r, i in enumerate(ordered)}

    rp, rm = rank(s_p), rank(s_m)
    cut = k * len(profile)
    xp = {i for i in profile if rp[i] < cut and rm[i] > cut}
    xm = {i for i in profile if rp[i] > cut and rm[i] < cut}
    return xp, xm


def test_extreme_sets_match_literal_on_random_profiles():
    rng = np.random.default_rng(1234)
    n_items, n_cats = 80, 6
    for _ in range(200):
        counts = rng.integers(0, 40, n_items)
        cats = (rng.random((n_items, n_cats)) < 0.3).astype(int)
        ds = make_dataset(counts, cats)
        profile = rng.choice(n_items, size=rng.integers(1, 51), replace=False)
        for k in (0.1, 0.3, 0.5, 0.7, 0.9):
            ex = extract_extreme_sets(ds, profile, k)
            xp, xm = _literal(counts.tolist(), cats.tolist(), profile.tolist(), k)
            assert ex.x_p == xp and ex.x_m == xm


profiles = st.integers(1, 30).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 9), min_size=n, max_size=n),
    st.lists(st.lists(st.integers(0, 1), min_size=4, max_size=4), min_size=n, max_size=n),
    st.floats(0.0, 1.0),
    st.randoms(use_true_random=False),
))


@settings(max_examples=150, deadline=None)
@given(profiles)
def test_extreme_set_invariants(case):
    counts, cats, k, rnd = case
    ds = make_dataset(counts, cats)
    items = list(range(len(counts)))
    ex = extract_extreme_sets(ds, items, k)
    assert not ex.x_p & ex.x_m
    assert ex.x_p | ex.x_m <= set(items)
    assert len(ex.x_p) < k * len(items) + 1 and len(ex.x_m) < k * len(items) + 1
    shuffled = items[:]
    rnd.shuffle(shuffled)
    again = extract_extreme_sets(ds, shuffled, k)
    assert again.x_p == ex.x_p and again.x_m == ex.x_m
    if sum(counts) > 0:
        assert bias_scores(ds, items).s_p.sum() == pytest.approx(1.0, abs=1e-12)
    sc = bias_scores(ds, items)
    assert sorted(sc.rank_p.tolist()) == list(range(1, len(items) + 1))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 8), st.floats(0.0, 1.0), st.randoms(use_true_random=False))
def test_identical_rankings_give_empty_sets(n, k, rnd):
    # give every item a distinct category mass that follows its popularity
    counts = list(range(n, 0, -1))
    cats = [[1 if c < n - i else 0 for c in range(n)] for i in range(n)]
    perm = list(range(n))
    rnd.shuffle(perm)
    counts = [counts[p] for p in perm]
    cats = [cats[p] for p in perm]
    ds = make_dataset(counts, cats)
    sc = bias_scores(ds, range(n))
    assert np.array_equal(sc.rank_p, sc.rank_m)
    ex = extract_extreme_sets(ds, range(n), k)
    assert not ex.x_p and not ex.x_m


def test_uncategorised_item_can_only_enter_xp():
    ds = make_dataset([50, 1, 1, 1], [[0, 0], [1, 0], [1, 0], [0, 1]])
    for k in (0.3, 0.5, 0.8):
        ex = extract_extreme_sets(ds, [0, 1, 2, 3], k)
        assert 0 not in ex.x_m


def test_score_rows_agree_on_profile():
    rng = np.random.default_rng(0)
    counts = rng.integers(1, 20, 15)
    cats = (rng.random((15, 4)) < 0.4).astype(int)
    ds = make_dataset(counts, cats)
    prof = [1, 4, 7, 9]
    s_m, s_p = score_rows(ds, prof)
    sc = bias_scores(ds, prof)
    np.testing.assert_allclose(s_p[prof], sc.s_p, rtol=0, atol=1e-15)
    np.testing.assert_allclose(s_m[prof], sc.s_m, rtol=0, atol=1e-12)


def test_dump_scores(tmp_path):
    counts = [40, 30, 20, 10]
    cats = [[0, 0, 0, 1], [0, 0, 1, 1], [0, 1, 1, 1], [1, 1, 1, 1]]
    ds = make_dataset(counts, cats)
    path = tmp_path / "scores.tsv"
    dump_scores(path, ds, {0: [0, 1, 2, 3]}, 0.5)
    rows = [line.split("\t") for line in path.read_text().splitlines()]
    assert rows[0][0] == "user" and len(rows) == 5
    tags = {r[1]: r[-1] for r in rows[1:]}
    assert tags == {"0": "XP", "1": "-", "2": "-", "3": "XM"}


def test_all_permutations_small_profile():
    # exhaustive over every assignment of popularity order on 4 items
    cats = [[1, 0, 0], [1, 1, 0], [0, 1, 1], [1, 1, 1]]
    for perm in itertools.permutations([1, 2, 3, 4]):
        counts = list(perm)
        ds = make_dataset(counts, cats)
        for k in (0.25, 0.5, 0.75, 1.0):
            ex = extract_extreme_sets(ds, [0, 1, 2, 3], k)
            assert (set(ex.x_p), set(ex.x_m)) == _literal(counts, cats, [0, 1, 2, 3], k)
