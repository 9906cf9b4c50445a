import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhstm.errors import InvariantError
from mhstm.tree import NEW, TopicTree
from mhstm.urn import (
    WEIGHT_QUANTUM,
    UrnState,
    addition_weight,
    apply,
    predictive_word_prob,
    recompute_addition_matrix,
    retract,
    topic_word_distribution,
)


def two_child_tree(depth=2):
    tree = TopicTree(depth, 1)
    a = tree.attach(0, [tree.root] + [NEW] * (depth - 1))
    b = tree.attach(0, [tree.root] + [NEW] * (depth - 1))
    return tree, a, b


def fill(urn, tree, node, counts):
    for v, c in enumerate(counts):
        for _ in range(c):
            apply(urn, tree, node, v)


def entropy(p):
    p = np.asarray(p, float)
    p = p[p > 0] / p.sum()
    return float(-(p * np.log(p)).sum())


def test_addition_weight_examples():
    tree, a, b = two_child_tree()
    urn = UrnState(tree.capacity, 3)
    # totals (10, 10); term 0 counts (5, 5), term 1 (3, 1) ... pad with term 2
    fill(urn, tree, a[1], [5, 3, 2])
    fill(urn, tree, b[1], [5, 1, 4])
    assert addition_weight(urn, tree, tree.root, 0) == 1.0
    expected = (-0.75 * math.log(0.75) - 0.25 * math.log(0.25)) / math.log(2)
    assert addition_weight(urn, tree, tree.root, 1) == pytest.approx(expected)
    assert addition_weight(urn, tree, tree.root, 1) == pytest.approx(0.8113, abs=1e-4)


def test_addition_weight_specific_term_is_zero():
    tree, a, b = two_child_tree()
    urn = UrnState(tree.capacity, 2)
    fill(urn, tree, a[1], [8, 2])
    fill(urn, tree, b[1], [0, 10])
    assert addition_weight(urn, tree, tree.root, 0) == 0.0


def test_addition_weight_degenerate_cases():
    tree = TopicTree(2, 1)
    only = tree.attach(0, [tree.root, NEW])
    urn = UrnState(tree.capacity, 2)
    fill(urn, tree, only[1], [3, 0])
    # a single child carries no entropy: full weight
    assert addition_weight(urn, tree, tree.root, 0) == 1.0
    tree2, a, b = two_child_tree()
    urn2 = UrnState(tree2.capacity, 3)
    fill(urn2, tree2, a[1], [2, 1, 0])
    fill(urn2, tree2, b[1], [1, 2, 0])
    # term never seen below the node: full weight
    assert addition_weight(urn2, tree2, tree2.root, 2) == 1.0
    with pytest.raises(ValueError):
        addition_weight(urn2, tree2, a[1], 0)


def test_initial_matrix_is_zero():
    tree, _, _ = two_child_tree()
    assert not UrnState(tree.capacity, 4).A.any()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 5), st.integers(2, 6))
def test_recompute_matches_brute_force_entropy(seed, n_children, V):
    rng = np.random.default_rng(seed)
    tree = TopicTree(2, 1)
    kids = [tree.attach(0, [tree.root, NEW])[1] for _ in range(n_children)]
    urn = UrnState(tree.capacity, V)
    counts = rng.integers(0, 4, size=(n_children, V))
    for k, c in zip(kids, counts):
        fill(urn, tree, k, c)
    A = recompute_addition_matrix(urn, tree)
    h = entropy(counts.sum(1))
    for v in range(V):
        if h == 0 or counts[:, v].sum() == 0:
            want = 1.0
        else:
            want = min(entropy(counts[:, v]) / h, 1.0)
        assert 0.0 <= A[tree.root, v] <= 1.0
        assert abs(A[tree.root, v] - want) <= WEIGHT_QUANTUM / 2 + 1e-15
        # stored values are exact multiples of the quantum
        assert (A[tree.root, v] / WEIGHT_QUANTUM).is_integer()
    for k in kids:
        assert not A[k].any()


def test_token_at_root_touches_only_root():
    tree, a, _ = two_child_tree()
    urn = UrnState(tree.capacity, 3)
    urn.A[:] = 0.5
    rec = apply(urn, tree, tree.root, 1)
    assert urn.N[tree.root, 1] == 1 and urn.W[tree.root, 1] == 1.0
    assert rec.weights == ()
    assert urn.W.sum() == 1.0


def test_leaf_token_feeds_ancestor_fraction():
    tree, a, _ = two_child_tree()
    urn = UrnState(tree.capacity, 3)
    urn.A[tree.root, 2] = 0.5
    rec = apply(urn, tree, a[1], 2)
    assert urn.W[a[1], 2] == 1.0
    assert urn.W[tree.root, 2] == 0.5
    assert urn.N[tree.root].sum() == 0
    assert rec.weights == (0.5,)


def test_zero_matrix_reduces_to_simple_urn():
    tree, a, _ = two_child_tree(depth=3)
    urn = UrnState(tree.capacity, 3)
    for v in range(3):
        apply(urn, tree, a[2], v)
    assert urn.W[a[2]].tolist() == [1.0, 1.0, 1.0]
    assert urn.W[a[1]].sum() == 0 and urn.W[tree.root].sum() == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_retract_reverses_apply_bitwise_across_recompute(seed):
    rng = np.random.default_rng(seed)
    tree = TopicTree(3, 1)
    leaves = [tree.attach(0, [tree.root, NEW, NEW]) for _ in range(2)]
    leaves.append(tree.attach(0, [tree.root, leaves[0][1], NEW]))
    urn = UrnState(tree.capacity, 5)
    records = []
    for _ in range(40):
        path = leaves[rng.integers(3)]
        records.append(apply(urn, tree, path[rng.integers(3)], int(rng.integers(5))))
    recompute_addition_matrix(urn, tree)
    W0, N0 = urn.W.copy(), urn.N.copy()
    path = leaves[rng.integers(3)]
    rec = apply(urn, tree, path[2], int(rng.integers(5)))
    recompute_addition_matrix(urn, tree)  # A changes between apply and retract
    retract(urn, rec)
    assert np.array_equal(urn.W, W0) and np.array_equal(urn.N, N0)
    for r in records:
        retract(urn, r)
    assert not urn.W.any() and not urn.N.any()
    assert not urn.Wsum.any() and not urn.Ntot.any()


def test_retract_corrupt_record():
    tree, a, _ = two_child_tree()
    urn = UrnState(tree.capacity, 2)
    rec = apply(urn, tree, a[1], 0)
    retract(urn, rec)
    with pytest.raises(InvariantError):
        retract(urn, rec)


def test_predictive_examples():
    tree, a, _ = two_child_tree()
    urn = UrnState(tree.capacity, 4)
    assert [predictive_word_prob(urn, 0.1, a[1], v) for v in range(4)] == [0.25] * 4
    urn3 = UrnState(tree.capacity, 3)
    urn3.W[a[1]] = [2.0, 0.0, 1.0]
    urn3.Wsum[a[1]] = 3.0
    np.testing.assert_allclose(topic_word_distribution(urn3, 0.1, a[1]), [2.1 / 3.3, 0.1 / 3.3, 1.1 / 3.3])
    assert topic_word_distribution(urn3, 0.1, a[1]) == pytest.approx([0.6364, 0.0303, 0.3333], abs=1e-4)
    with pytest.raises(ValueError):
        predictive_word_prob(urn3, 0.0, a[1], 0)


def test_predictive_concentrates_as_eta_vanishes():
    tree, a, _ = two_child_tree()
    urn = UrnState(tree.capacity, 5)
    apply(urn, tree, a[1], 3)
    phi = topic_word_distribution(urn, 1e-9, a[1])
    assert phi[3] > 1 - 1e-7


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.001, 5.0))
def test_predictive_normalized(seed, eta):
    rng = np.random.default_rng(seed)
    tree, a, b = two_child_tree()
    urn = UrnState(tree.capacity, 7)
    urn.A[tree.root] = rng.random(7)
    for _ in range(30):
        apply(urn, tree, [a[1], b[1]][rng.integers(2)], int(rng.integers(7)))
    for k in (tree.root, a[1], b[1]):
        phi = topic_word_distribution(urn, eta, k)
        assert abs(phi.sum() - 1.0) < 1e-12
        assert all(phi[v] == predictive_word_prob(urn, eta, k, v) for v in range(7))
