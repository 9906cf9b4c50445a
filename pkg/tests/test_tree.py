import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhstm.errors import InvariantError
from mhstm.tree import (
    NEW,
    TopicTree,
    enumerate_candidate_paths,
    ncrp_child_distribution,
    path_log_prior,
)
from mhstm.urn import UrnState, apply


def build(depth, brand_paths, n_brands=2):
    """Tree grown by attaching (brand, path-with-placeholders) in order."""
    tree = TopicTree(depth, n_brands, capacity=4)
    out = []
    for b, path in brand_paths:
        out.append(tree.attach(b, [tree.root] + list(path)))
    return tree, out


def test_child_distribution_empty_tree():
    tree = TopicTree(2, 1)
    kids, p = ncrp_child_distribution(tree, tree.root, 0, 1.0)
    assert kids == [] and p.tolist() == [1.0]


def test_child_distribution_hand_example():
    # brand 0 visits: 3 sentences to the first child, 1 to the second
    tree, paths = build(2, [(0, [NEW])])
    first = paths[0][1]
    for _ in range(2):
        tree.attach(0, [tree.root, first])
    tree.attach(0, [tree.root, NEW])
    kids, p = ncrp_child_distribution(tree, tree.root, 0, 1.0)
    assert tree.visits(tree.root, 0) == 4
    np.testing.assert_allclose(p, [4 / 7, 2 / 7, 1 / 7], rtol=0, atol=1e-15)


def test_child_distribution_gamma_limit():
    tree, _ = build(2, [(0, [NEW])])
    _, p = ncrp_child_distribution(tree, tree.root, 0, 1e-12)
    assert p[-1] < 1e-11
    with pytest.raises(ValueError):
        ncrp_child_distribution(tree, tree.root, 0, 0.0)


def test_child_distribution_is_brand_specific():
    tree, paths = build(2, [(0, [NEW]), (0, [NEW])])
    a = paths[0][1]
    for _ in range(5):
        tree.attach(1, [tree.root, a])
    _, p0 = ncrp_child_distribution(tree, tree.root, 0, 1.0)
    _, p1 = ncrp_child_distribution(tree, tree.root, 1, 1.0)
    np.testing.assert_allclose(p0, [2 / 5, 2 / 5, 1 / 5])
    np.testing.assert_allclose(p1, [6 / 8, 1 / 8, 1 / 8])


def test_path_prior_single_branch():
    tree, _ = build(2, [(0, [NEW]), (0, [NEW])])
    lp = path_log_prior(tree, 0, [tree.root, NEW], 1.0)
    assert lp == pytest.approx(math.log(1 / (1 + 2 + 2)))


def test_path_prior_two_factors():
    tree = TopicTree(3, 1)
    r = tree.root
    a = tree.attach(0, [r, NEW, NEW])
    b = tree.attach(0, [r, a[1], NEW])
    tree.attach(0, [r, a[1], a[2]])
    tree.attach(0, [r, NEW, NEW])
    # root: M=4, mids visited (3, 1) -> (3+1)/(1+4+2) = 4/7
    # first mid: M=3, leaves visited (2, 1) -> second leaf (1+1)/(1+3+2) = 1/3
    assert path_log_prior(tree, 0, list(b), 1.0) == pytest.approx(math.log(4 / 7 * 1 / 3))
    assert path_log_prior(tree, 0, list(a), 1.0) == pytest.approx(math.log(4 / 7 * 3 / 6))
    # branching under the first mid: 4/7 times the new-child factor 1/(1+3+2)
    assert path_log_prior(tree, 0, [r, a[1], NEW], 1.0) == pytest.approx(math.log(4 / 7 * 1 / 6))


def test_path_prior_rejects_invalid_edges():
    tree, paths = build(3, [(0, [NEW, NEW]), (0, [NEW, NEW])])
    bad = [tree.root, paths[0][1], paths[1][2]]
    with pytest.raises(ValueError):
        path_log_prior(tree, 0, bad, 1.0)
    with pytest.raises(ValueError):
        path_log_prior(tree, 0, [tree.root, NEW, paths[0][2]], 1.0)


def test_candidates_root_only():
    tree = TopicTree(2, 1)
    assert enumerate_candidate_paths(tree) == [(tree.root, NEW)]


def test_candidates_1_2_3_tree():
    tree = TopicTree(3, 1)
    r = tree.root
    a = tree.attach(0, [r, NEW, NEW])
    b = tree.attach(0, [r, NEW, NEW])
    tree.attach(0, [r, a[1], NEW])
    cands = enumerate_candidate_paths(tree)
    assert len(cands) == 6
    existing = [c for c in cands if NEW not in c]
    assert len(existing) == 3
    assert sum(1 for c in cands if c[1] == NEW) == 1


def random_tree(rng, depth, n_brands, n_sentences):
    tree = TopicTree(depth, n_brands, capacity=4)
    paths = []
    for _ in range(n_sentences):
        cands = enumerate_candidate_paths(tree)
        path = cands[rng.integers(len(cands))]
        paths.append((int(rng.integers(n_brands)), tree.attach(int(rng.integers(n_brands)), path)))
    return tree


def brute_force_prior_mass(tree, brand, gamma):
    """Sum over candidates of the product of hand-computed nCRP factors."""
    a = tree.arrays

    def kids(k):
        return [c for c in tree.nodes() if a.parent[c] == k]

    def walk(k, mass):
        if tree.level(k) == tree.depth - 1:
            return mass
        ch = kids(k)
        denom = gamma + a.visits[k, brand] + len(ch)
        total = mass * gamma / denom
        for c in ch:
            total += walk(c, mass * (a.visits[c, brand] + 1) / denom)
        return total

    return walk(tree.root, 1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 4), st.integers(1, 25), st.floats(0.05, 5.0))
def test_prior_normalizes_over_candidates(seed, depth, n, gamma):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, depth, 2, n)
    for brand in range(2):
        total = sum(math.exp(path_log_prior(tree, brand, c, gamma)) for c in enumerate_candidate_paths(tree))
        assert total == pytest.approx(1.0, abs=1e-12)
        assert brute_force_prior_mass(tree, brand, gamma) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 4), st.integers(0, 25))
def test_candidate_count_identity(seed, depth, n):
    tree = random_tree(np.random.default_rng(seed), depth, 1, n)
    leaves = len(tree.leaves())
    assert len(enumerate_candidate_paths(tree)) == leaves + (len(tree) - leaves)
    # brute force: existing complete paths plus one per internal node
    complete = sum(1 for k in tree.nodes() if tree.is_leaf(k))
    internal = sum(1 for k in tree.nodes() if not tree.is_leaf(k))
    assert len(enumerate_candidate_paths(tree)) == complete + internal


def snapshot(tree):
    a = tree.arrays
    nodes = tree.nodes()
    return (
        [tree.uid(k) for k in nodes],
        [None if tree.parent(k) is None else tree.uid(tree.parent(k)) for k in nodes],
        a.visits[nodes].tolist(),
    )


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_attach_detach_round_trip(seed):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, 3, 2, 10)
    before = snapshot(tree)
    cands = enumerate_candidate_paths(tree)
    path = cands[rng.integers(len(cands))]
    placed = tree.attach(1, path)
    tree.detach(1, placed)
    assert snapshot(tree)[1:] == before[1:]
    assert [u for u in snapshot(tree)[0]] == before[0]


def test_attach_materializes_one_node_per_placeholder():
    tree, paths = build(3, [(0, [NEW, NEW])])
    n = len(tree)
    tree.attach(0, [tree.root, paths[0][1], NEW])
    assert len(tree) == n + 1
    assert len(tree.children(paths[0][1])) == 2


def test_detach_last_visitor_prunes():
    tree, paths = build(3, [(0, [NEW, NEW]), (0, [NEW, NEW])])
    mid = paths[0][1]
    tree.attach(0, [tree.root, mid, NEW])
    assert len(tree.children(mid)) == 2
    pruned = tree.detach(0, paths[0])
    assert pruned == 1
    assert len(tree.children(mid)) == 1


def test_pruning_refused_while_weight_remains():
    tree, paths = build(2, [(0, [NEW])])
    urn = UrnState(tree.capacity, 3)
    apply(urn, tree, paths[0][1], 2)
    with pytest.raises(InvariantError):
        tree.detach(0, paths[0], urn)


def test_detach_underflow():
    tree, paths = build(2, [(0, [NEW])])
    with pytest.raises(InvariantError):
        tree.detach(1, paths[0])


def test_uids_never_reused():
    tree, paths = build(2, [(0, [NEW])])
    old = tree.uid(paths[0][1])
    tree.detach(0, paths[0])
    new = tree.attach(0, [tree.root, NEW])
    assert tree.uid(new[1]) > old


def test_root_visits_equal_attached_sentences():
    rng = np.random.default_rng(3)
    tree = TopicTree(3, 3, capacity=2)
    counts = np.zeros(3, int)
    for _ in range(50):
        b = int(rng.integers(3))
        cands = enumerate_candidate_paths(tree)
        tree.attach(b, cands[rng.integers(len(cands))])
        counts[b] += 1
    assert tree.arrays.visits[tree.root].tolist() == counts.tolist()
    for k in tree.nodes():
        if not tree.is_leaf(k):
            below = sum(tree.arrays.visits[c] for c in tree.children(k))
            assert (below == tree.arrays.visits[k]).all()
    assert max(tree.level(k) for k in tree.nodes()) == 2


def test_growth_keeps_structure():
    tree = TopicTree(2, 1, capacity=2)
    made = [tree.attach(0, [tree.root, NEW]) for _ in range(20)]
    assert len(tree) == 21
    assert sorted(tree.children(tree.root)) == sorted(p[1] for p in made)
