"""Hierarchical Polya urn: word weights shared up the topic tree.

Drawing term ``v`` at node ``k`` adds one ball of colour ``v`` to urn ``k``
and a fractional ball of weight ``A[k', v]`` to every ancestor ``k'``. The
weights come from how evenly ``v`` spreads over the children of ``k'``:
terms specific to one child add nothing upward, terms shared by all
children add a full ball.

Addition weights are rounded to multiples of 2**-20. Every weight in ``W``
is then a dyadic rational well inside float64 precision, so any sequence
of additions and matching subtractions cancels exactly, whatever the order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numba import njit

from .errors import InvariantError
from .tree import N_ALIVE, TopicTree

WEIGHT_QUANTUM = 2.0**-20


class UrnArrays(NamedTuple):
    W: np.ndarray  # (capacity, V) cumulative weights
    N: np.ndarray  # (capacity, V) raw assignment counts
    Wsum: np.ndarray
    Ntot: np.ndarray
    A: np.ndarray  # (capacity, V) addition weights, rows of internal nodes


def empty_urn_arrays(capacity: int, n_terms: int) -> UrnArrays:
    return UrnArrays(
        W=np.zeros((capacity, n_terms)),
        N=np.zeros((capacity, n_terms), np.int64),
        Wsum=np.zeros(capacity),
        Ntot=np.zeros(capacity, np.int64),
        A=np.zeros((capacity, n_terms)),
    )


@njit(cache=True)
def quantize(a):
    return math.floor(a / 2.0**-20 + 0.5) * 2.0**-20


@njit(cache=True)
def apply_token(u, path, level, v, rec):
    """Assign term ``v`` to ``path[level]``; ancestor weights go into ``rec``."""
    k = path[level]
    u.N[k, v] += 1
    u.Ntot[k] += 1
    u.W[k, v] += 1.0
    u.Wsum[k] += 1.0
    for j in range(level):
        anc = path[j]
        a = u.A[anc, v]
        u.W[anc, v] += a
        u.Wsum[anc] += a
        rec[j] = a
    for j in range(level, rec.shape[0]):
        rec[j] = 0.0


@njit(cache=True)
def retract_token(u, path, level, v, rec):
    """Exact inverse of ``apply_token`` using the recorded ancestor weights."""
    k = path[level]
    if u.N[k, v] <= 0 or u.W[k, v] < 1.0:
        return -2
    u.N[k, v] -= 1
    u.Ntot[k] -= 1
    u.W[k, v] -= 1.0
    u.Wsum[k] -= 1.0
    bad = 0
    for j in range(level):
        anc = path[j]
        u.W[anc, v] -= rec[j]
        u.Wsum[anc] -= rec[j]
        if u.W[anc, v] < 0.0:
            bad = 1
    return -2 if bad else 0


@njit(cache=True)
def _entropy(counts, n):
    total = 0.0
    for i in range(n):
        total += counts[i]
    if total <= 0.0:
        return 0.0
    h = 0.0
    for i in range(n):
        if counts[i] > 0:
            p = counts[i] / total
            h -= p * math.log(p)
    return h


@njit(cache=True)
def addition_weight_raw(tr, u, k, v, kids, nkids):
    """Unrounded addition weight of term ``v`` at internal node ``k``."""
    tot = np.empty(nkids)
    cnt = np.empty(nkids)
    s = 0.0
    for i in range(nkids):
        tot[i] = u.Ntot[kids[i]]
        cnt[i] = u.N[kids[i], v]
        s += cnt[i]
    h = _entropy(tot, nkids)
    if h <= 0.0 or s <= 0.0:
        return 1.0
    return min(_entropy(cnt, nkids) / h, 1.0)


@njit(cache=True)
def recompute_addition(tr, u, depth):
    """Refresh every row of ``A`` for internal nodes from raw child counts."""
    n = tr.meta[N_ALIVE]
    V = u.A.shape[1]
    kids = np.empty(n, np.int64)
    tot = np.empty(n)
    cnt = np.empty(n)
    u.A[:, :] = 0.0
    for i in range(n):
        k = tr.order[i]
        if tr.level[k] >= depth - 1:
            continue
        nk = 0
        for j in range(n):
            c = tr.order[j]
            if tr.parent[c] == k:
                kids[nk] = c
                tot[nk] = u.Ntot[c]
                nk += 1
        h = _entropy(tot, nk)
        if h <= 0.0:
            u.A[k, :] = 1.0
            continue
        for v in range(V):
            s = 0
            for j in range(nk):
                cnt[j] = u.N[kids[j], v]
                s += u.N[kids[j], v]
            if s == 0:
                u.A[k, v] = 1.0
            else:
                u.A[k, v] = quantize(min(_entropy(cnt, nk) / h, 1.0))


@dataclass(frozen=True)
class TokenRecord:
    node: int
    term: int
    path: tuple[int, ...]  # root .. node
    weights: tuple[float, ...]  # weight added at each ancestor, root first


class UrnState:
    """Word-weight state of every topic node.

    Rows are indexed by tree slot; grow together with the tree.
    """

    def __init__(self, capacity: int, n_terms: int):
        self.n_terms = n_terms
        self.arrays = empty_urn_arrays(capacity, n_terms)

    @property
    def W(self):
        return self.arrays.W

    @property
    def N(self):
        return self.arrays.N

    @property
    def Wsum(self):
        return self.arrays.Wsum

    @property
    def Ntot(self):
        return self.arrays.Ntot

    @property
    def A(self):
        return self.arrays.A

    @property
    def capacity(self) -> int:
        return self.arrays.W.shape[0]

    def grow(self, capacity: int) -> None:
        C = self.capacity
        if capacity <= C:
            return
        new = empty_urn_arrays(capacity, self.n_terms)
        for old, fresh in zip(self.arrays, new):
            fresh[:C] = old
        self.arrays = new

    def sync(self, tree: TopicTree) -> None:
        self.grow(tree.capacity)

    def copy(self) -> "UrnState":
        out = UrnState.__new__(UrnState)
        out.n_terms = self.n_terms
        out.arrays = UrnArrays(*(a.copy() for a in self.arrays))
        return out


def addition_weight(urn: UrnState, tree: TopicTree, k: int, v: int) -> float:
    """Entropy-ratio addition weight of term ``v`` at internal node ``k``."""
    if tree.is_leaf(k):
        raise ValueError("addition weights are defined for internal nodes only")
    kids = np.array(tree.children(k), dtype=np.int64)
    return float(addition_weight_raw(tree.arrays, urn.arrays, k, v, kids, len(kids)))


def recompute_addition_matrix(urn: UrnState, tree: TopicTree) -> np.ndarray:
    urn.sync(tree)
    recompute_addition(tree.arrays, urn.arrays, tree.depth)
    return urn.A


def apply(urn: UrnState, tree: TopicTree, k: int, v: int) -> TokenRecord:
    """Assign one token of term ``v`` to node ``k`` using the current ``A``."""
    urn.sync(tree)
    path = np.array(list(reversed(tree.ancestors(k))) + [k], dtype=np.int64)
    level = len(path) - 1
    rec = np.zeros(max(tree.depth - 1, 1))
    apply_token(urn.arrays, path, level, v, rec)
    return TokenRecord(int(k), int(v), tuple(path.tolist()), tuple(rec[:level].tolist()))


def retract(urn: UrnState, record: TokenRecord) -> None:
    path = np.array(record.path, dtype=np.int64)
    level = len(path) - 1
    rec = np.zeros(max(level, 1))
    rec[:level] = record.weights
    if retract_token(urn.arrays, path, level, record.term, rec) != 0:
        raise InvariantError(f"negative weight retracting term {record.term} from node {record.node}")


def predictive_word_prob(urn: UrnState, eta: float, k: int, v: int) -> float:
    if eta <= 0:
        raise ValueError("eta must be positive")
    return float((urn.W[k, v] + eta) / (urn.Wsum[k] + urn.n_terms * eta))


def topic_word_distribution(urn: UrnState, eta: float, k: int) -> np.ndarray:
    if eta <= 0:
        raise ValueError("eta must be positive")
    return (urn.W[k] + eta) / (urn.Wsum[k] + urn.n_terms * eta)
