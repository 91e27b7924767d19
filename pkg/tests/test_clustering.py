import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmoe.clustering import (
    GroupAssignment,
    adjusted_rand_index,
    count_balanced_partitions,
    exhaustive_cluster,
    greedy_cluster,
    group_sizes,
    intra_group_similarity,
    objective,
    random_balanced_assignment,
    _balanced_partitions,
)
from dmoe.probe import SimilarityMatrix


def codes(n):
    return [f"c{i:02d}" for i in range(n)]


def random_matrix(n, rng):
    a = rng.uniform(-1, 1, size=(n, n))
    s = 0.5 * (a + a.T)
    np.fill_diagonal(s, 1.0)
    return SimilarityMatrix(codes(n), s, [])


def matrix_from_pairs(langs, pairs, fill=0.0):
    n = len(langs)
    s = np.full((n, n), fill)
    np.fill_diagonal(s, 1.0)
    for (a, b), v in pairs.items():
        i, j = langs.index(a), langs.index(b)
        s[i, j] = s[j, i] = v
    return SimilarityMatrix(list(langs), s, [])


def test_intra_group_similarity_examples():
    m = matrix_from_pairs(["a", "b", "c"], {("a", "b"): 0.9, ("a", "c"): 0.8, ("b", "c"): 0.7})
    assert intra_group_similarity(m, ["a", "b"]) == 0.9
    assert intra_group_similarity(m, ["a", "b", "c"]) == 0.7
    assert intra_group_similarity(m, ["a"]) == 1.0
    with pytest.raises(KeyError):
        intra_group_similarity(m, ["a", "zz"])


def test_objective_examples():
    m = matrix_from_pairs(
        ["a", "b", "c", "d"],
        {("a", "b"): 0.9, ("c", "d"): 0.4, ("a", "c"): 0.1, ("a", "d"): 0.2, ("b", "c"): 0.3, ("b", "d"): 0.5},
    )
    a = GroupAssignment.from_groups([["a", "b"], ["c", "d"]])
    assert objective(m, a) == pytest.approx(0.9 + 0.4, abs=1e-15)
    relabelled = GroupAssignment.from_groups([["c", "d"], ["a", "b"]])
    assert objective(m, relabelled) == objective(m, a)
    singletons = GroupAssignment.from_groups([["a"], ["b"], ["c"], ["d"]])
    assert objective(m, singletons) == 4.0


def test_assignment_rejects_empty_group():
    with pytest.raises(ValueError):
        GroupAssignment(3, {"a": 0, "b": 2})


def test_group_sizes_put_remainder_first():
    assert group_sizes(10, 4) == [3, 3, 2, 2]
    assert group_sizes(18, 9) == [2] * 9


def test_greedy_forced_partitions():
    m = random_matrix(6, np.random.default_rng(0))
    assert greedy_cluster(m, 1).groups == [codes(6)]
    assert sorted(greedy_cluster(m, 6).sizes) == [1] * 6
    with pytest.raises(ValueError):
        greedy_cluster(m, 7)


def test_greedy_nine_pairs():
    m = random_matrix(18, np.random.default_rng(1))
    a = greedy_cluster(m, 9)
    assert a.num_groups == 9 and a.sizes == [2] * 9


def test_greedy_recovers_planted_blocks():
    rng = np.random.default_rng(2)
    n, k = 12, 4
    truth = {c: i % k for i, c in enumerate(codes(n))}
    s = rng.uniform(-0.2, 0.2, size=(n, n))
    same = np.array([[truth[a] == truth[b] for b in codes(n)] for a in codes(n)])
    s = np.where(same, 0.8 + 0.1 * rng.random((n, n)), s)
    s = 0.5 * (s + s.T)
    np.fill_diagonal(s, 1.0)
    a = greedy_cluster(SimilarityMatrix(codes(n), s, []), k)
    assert adjusted_rand_index(a.group_of, truth) == 1.0


def test_greedy_ties_follow_code_order():
    n = 6
    m = SimilarityMatrix(codes(n), np.ones((n, n)), [])
    assert greedy_cluster(m, 2).groups == [codes(6)[:3], codes(6)[3:]]


def test_exhaustive_small_example():
    langs = ["a", "b", "c", "d"]
    m = matrix_from_pairs(langs, {("a", "b"): 0.9, ("c", "d"): 0.8, ("a", "c"): 0.1})
    a = exhaustive_cluster(m, 2)
    assert a.partition() == frozenset({frozenset("ab"), frozenset("cd")})
    assert exhaustive_cluster(m, 1).groups == [langs]


def test_exhaustive_rejects_large_inputs():
    with pytest.raises(ValueError):
        exhaustive_cluster(random_matrix(11, np.random.default_rng(0)), 2)


@pytest.mark.parametrize("n,k", [(4, 2), (6, 3), (7, 3), (8, 2), (8, 4), (9, 4), (10, 3)])
def test_partition_enumeration_is_complete_and_unique(n, k):
    parts = list(_balanced_partitions(codes(n), group_sizes(n, k)))
    keys = {frozenset(frozenset(g) for g in p) for p in parts}
    assert len(keys) == len(parts) == count_balanced_partitions(n, k)
    for p in parts:
        assert sorted(len(g) for g in p) == sorted(group_sizes(n, k))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([2, 3, 4]))
def test_greedy_never_beats_exhaustive(seed, k):
    m = random_matrix(8, np.random.default_rng(seed))
    g = greedy_cluster(m, k)
    e = exhaustive_cluster(m, k)
    assert objective(m, g) <= objective(m, e) + 1e-12
    assert g.is_balanced() and e.is_balanced()


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n))), st.integers(0, 999))
def test_greedy_is_balanced(nk, seed):
    n, k = nk
    a = greedy_cluster(random_matrix(n, np.random.default_rng(seed)), k)
    assert a.num_groups == k
    assert max(a.sizes) - min(a.sizes) <= 1
    assert sorted(a.group_of) == codes(n)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_greedy_permutation_and_affine_invariance(seed):
    rng = np.random.default_rng(seed)
    m = random_matrix(9, rng)
    base = greedy_cluster(m, 3).partition()
    perm = rng.permutation(9)
    shuffled = SimilarityMatrix([m.languages[i] for i in perm], m.values[np.ix_(perm, perm)], [])
    assert greedy_cluster(shuffled, 3).partition() == base
    scaled = 2.0 * m.values + 0.25
    np.fill_diagonal(scaled, 1.0)
    assert greedy_cluster(SimilarityMatrix(m.languages, scaled, []), 3).partition() == base


def test_greedy_is_deterministic():
    m = random_matrix(10, np.random.default_rng(5))
    assert greedy_cluster(m, 3).group_of == greedy_cluster(m, 3).group_of


def test_random_assignment_is_balanced():
    a = random_balanced_assignment(codes(10), 4, np.random.default_rng(0))
    assert sorted(a.sizes) == [2, 2, 3, 3]


def test_adjusted_rand_index():
    a = {"x": 0, "y": 0, "z": 1, "w": 1}
    assert adjusted_rand_index(a, {"x": 1, "y": 1, "z": 0, "w": 0}) == 1.0
    assert adjusted_rand_index(a, {"x": 0, "y": 1, "z": 0, "w": 1}) < 0.0
    with pytest.raises(ValueError):
        adjusted_rand_index(a, {"x": 0})


def test_assignment_json_round_trip(tmp_path):
    a = GroupAssignment.from_groups([["a", "c"], ["b"]])
    a.to_json(tmp_path / "g.json", 1.5, "abc")
    payload = json.loads((tmp_path / "g.json").read_text())
    assert payload["num_groups"] == 2 and payload["matrix_sha256"] == "abc"
    assert GroupAssignment.from_json(tmp_path / "g.json") == a
