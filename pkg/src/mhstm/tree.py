"""Topic tree with per-brand sentence-visit counts and nested CRP priors.

Nodes live in slots of preallocated arrays so the sampler kernels can
mutate the tree without Python round-trips. A slot is reused after its
node is pruned, but every node also carries a ``uid`` drawn from a counter
that never repeats; exports and candidate ordering use the uid.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from numba import njit

from .errors import InvariantError

NEW = -1  # placeholder for a node that does not exist yet

# meta slots
N_ALIVE, N_FREE, NEXT_UID = 0, 1, 2

OK, ERR_CAPACITY, ERR_UNDERFLOW, ERR_WEIGHT, ERR_PATH = 0, 1, -1, -2, -3


class TreeArrays(NamedTuple):
    parent: np.ndarray  # slot of parent, -1 for root / free slots
    level: np.ndarray  # 0 for the root, -1 for free slots
    uid: np.ndarray
    nchild: np.ndarray
    visits: np.ndarray  # (capacity, B) sentence visits per brand
    totvis: np.ndarray
    order: np.ndarray  # alive slots in increasing uid order, first meta[N_ALIVE] valid
    free: np.ndarray  # stack of free slots, first meta[N_FREE] valid
    meta: np.ndarray


def empty_tree_arrays(capacity: int, n_brands: int) -> TreeArrays:
    tr = TreeArrays(
        parent=np.full(capacity, -1, np.int64),
        level=np.full(capacity, -1, np.int64),
        uid=np.full(capacity, -1, np.int64),
        nchild=np.zeros(capacity, np.int64),
        visits=np.zeros((capacity, n_brands), np.int64),
        totvis=np.zeros(capacity, np.int64),
        order=np.zeros(capacity, np.int64),
        free=np.arange(capacity - 1, -1, -1, dtype=np.int64),
        meta=np.array([0, capacity, 0], np.int64),
    )
    return tr


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def new_node(tr, parent, level):
    if tr.meta[N_FREE] == 0:
        return -1
    tr.meta[N_FREE] -= 1
    k = tr.free[tr.meta[N_FREE]]
    tr.parent[k] = parent
    tr.level[k] = level
    tr.uid[k] = tr.meta[NEXT_UID]
    tr.meta[NEXT_UID] += 1
    tr.nchild[k] = 0
    tr.visits[k, :] = 0
    tr.totvis[k] = 0
    tr.order[tr.meta[N_ALIVE]] = k
    tr.meta[N_ALIVE] += 1
    if parent >= 0:
        tr.nchild[parent] += 1
    return k


@njit(cache=True)
def drop_node(tr, k):
    n = tr.meta[N_ALIVE]
    j = 0
    while tr.order[j] != k:
        j += 1
    for i in range(j, n - 1):
        tr.order[i] = tr.order[i + 1]
    tr.meta[N_ALIVE] = n - 1
    p = tr.parent[k]
    if p >= 0:
        tr.nchild[p] -= 1
    tr.parent[k] = -1
    tr.level[k] = -1
    tr.uid[k] = -1
    tr.free[tr.meta[N_FREE]] = k
    tr.meta[N_FREE] += 1


@njit(cache=True)
def attach_path(tr, brand, path):
    """Materialize placeholders in ``path`` (in place) and count one visit."""
    L = path.shape[0]
    for l in range(L):
        if path[l] < 0:
            if l == 0:
                return ERR_PATH
            k = new_node(tr, path[l - 1], l)
            if k < 0:
                return ERR_CAPACITY
            path[l] = k
        tr.visits[path[l], brand] += 1
        tr.totvis[path[l]] += 1
    return OK


@njit(cache=True)
def detach_path(tr, brand, path):
    L = path.shape[0]
    for l in range(L):
        if tr.visits[path[l], brand] <= 0:
            return ERR_UNDERFLOW
    for l in range(L):
        tr.visits[path[l], brand] -= 1
        tr.totvis[path[l]] -= 1
    return OK


@njit(cache=True)
def prune_path(tr, W, N, Wsum, Ntot, A, path):
    """Drop unvisited, weightless nodes on ``path`` bottom-up.

    Returns the number of pruned nodes, or ERR_WEIGHT if an unvisited node
    still carries word weight.
    """
    pruned = 0
    for l in range(path.shape[0] - 1, 0, -1):
        k = path[l]
        if tr.totvis[k] > 0:
            break
        if Wsum[k] != 0.0 or Ntot[k] != 0:
            return ERR_WEIGHT
        W[k, :] = 0.0
        N[k, :] = 0
        A[k, :] = 0.0
        drop_node(tr, k)
        pruned += 1
    return pruned


@njit(cache=True)
def child_log_factor(tr, brand, k, gamma):
    """log of the nCRP factor for stepping from parent(k) into existing child k."""
    p = tr.parent[k]
    return math.log((tr.visits[k, brand] + 1.0) / (gamma + tr.visits[p, brand] + tr.nchild[p]))


@njit(cache=True)
def new_child_log_factor(tr, brand, k, gamma):
    return math.log(gamma / (gamma + tr.visits[k, brand] + tr.nchild[k]))


# ---------------------------------------------------------------------------
# Python wrapper
# ---------------------------------------------------------------------------


class TopicTree:
    """An L-level topic tree shared by all brands.

    Node handles are slot indices; they stay valid while the node lives.
    ``uid(k)`` gives the run-unique id used in exports. The root is created
    on construction and is never pruned.
    """

    def __init__(self, depth: int, n_brands: int, capacity: int = 64):
        if depth < 2:
            raise ValueError("tree depth must be >= 2")
        self.depth = depth
        self.n_brands = n_brands
        self.arrays = empty_tree_arrays(max(capacity, depth), n_brands)
        self.root = new_node(self.arrays, -1, 0)

    # -- structure -------------------------------------------------------
    @property
    def capacity(self) -> int:
        return len(self.arrays.parent)

    @property
    def n_free(self) -> int:
        return int(self.arrays.meta[N_FREE])

    def grow(self, capacity: int) -> None:
        old = self.arrays
        C = self.capacity
        if capacity <= C:
            return
        new = empty_tree_arrays(capacity, self.n_brands)
        for name in ("parent", "level", "uid", "nchild", "totvis", "order"):
            getattr(new, name)[:C] = getattr(old, name)
        new.visits[:C] = old.visits
        nf = int(old.meta[N_FREE])
        extra = np.arange(capacity - 1, C - 1, -1, dtype=np.int64)
        new.free[: len(extra)] = extra
        new.free[len(extra) : len(extra) + nf] = old.free[:nf]
        new.meta[:] = [old.meta[N_ALIVE], nf + len(extra), old.meta[NEXT_UID]]
        self.arrays = new

    def nodes(self) -> list[int]:
        """Alive node slots in uid order (parents before children)."""
        return self.arrays.order[: self.arrays.meta[N_ALIVE]].tolist()

    def __len__(self) -> int:
        return int(self.arrays.meta[N_ALIVE])

    def uid(self, k: int) -> int:
        return int(self.arrays.uid[k])

    def slot_of(self, uid: int) -> int:
        hits = np.flatnonzero(self.arrays.uid == uid)
        if len(hits) == 0:
            raise KeyError(f"no live node with id {uid}")
        return int(hits[0])

    def level(self, k: int) -> int:
        return int(self.arrays.level[k])

    def parent(self, k: int) -> int | None:
        p = int(self.arrays.parent[k])
        return None if p < 0 else p

    def children(self, k: int) -> list[int]:
        return [c for c in self.nodes() if self.arrays.parent[c] == k]

    def ancestors(self, k: int) -> list[int]:
        out = []
        p = self.parent(k)
        while p is not None:
            out.append(p)
            p = self.parent(p)
        return out

    def is_leaf(self, k: int) -> bool:
        return self.level(k) == self.depth - 1

    def leaves(self) -> list[int]:
        return [k for k in self.nodes() if self.is_leaf(k)]

    def nodes_at_level(self, level: int) -> list[int]:
        return [k for k in self.nodes() if self.level(k) == level]

    def visits(self, k: int, brand: int | None = None):
        if brand is None:
            return int(self.arrays.totvis[k])
        return int(self.arrays.visits[k, brand])

    # -- counts ----------------------------------------------------------
    def validate_path(self, path) -> None:
        path = list(path)
        if len(path) != self.depth:
            raise ValueError(f"path length {len(path)} != depth {self.depth}")
        if path[0] != self.root:
            raise ValueError("path must start at the root")
        seen_new = False
        for l in range(1, self.depth):
            if path[l] == NEW:
                seen_new = True
                continue
            if seen_new:
                raise ValueError("placeholders must form a contiguous suffix")
            if self.level(path[l]) != l or self.arrays.parent[path[l]] != path[l - 1]:
                raise ValueError(f"invalid edge {path[l - 1]} -> {path[l]}")

    def attach(self, brand: int, path) -> tuple[int, ...]:
        """Count one sentence visit along ``path``; returns the materialized path."""
        self.validate_path(path)
        self.grow_for(self.depth)
        arr = np.array(path, dtype=np.int64)
        code = attach_path(self.arrays, brand, arr)
        if code != OK:
            raise InvariantError(f"attach failed with code {code}")
        return tuple(int(k) for k in arr)

    def detach(self, brand: int, path, urn=None) -> int:
        """Remove one visit along ``path`` and prune emptied nodes.

        Without an ``urn`` the word-weight condition of pruning is taken as
        satisfied. Returns the number of pruned nodes.
        """
        self.validate_path(path)
        arr = np.array(path, dtype=np.int64)
        if detach_path(self.arrays, brand, arr) != OK:
            raise InvariantError(f"visit count underflow on path {tuple(path)}")
        if urn is None:
            from .urn import UrnState

            urn = UrnState(self.capacity, 1)
        n = prune_path(self.arrays, urn.W, urn.N, urn.Wsum, urn.Ntot, urn.A, arr)
        if n < 0:
            raise InvariantError("unvisited node still carries word weight")
        return n

    def grow_for(self, n_new: int) -> bool:
        if self.n_free >= n_new:
            return False
        self.grow(max(2 * self.capacity, self.capacity + n_new))
        return True

    # -- export ----------------------------------------------------------
    def to_dict(self) -> dict:
        nodes = []
        for k in self.nodes():
            p = self.parent(k)
            nodes.append(
                {
                    "id": self.uid(k),
                    "level": self.level(k),
                    "parent": None if p is None else self.uid(p),
                    "visits": self.arrays.visits[k].tolist(),
                }
            )
        edges = [[n["parent"], n["id"]] for n in nodes if n["parent"] is not None]
        return {"depth": self.depth, "n_brands": self.n_brands, "nodes": nodes, "edges": edges}


def ncrp_child_distribution(tree: TopicTree, node: int, brand: int, gamma: float):
    """Children of ``node`` and the nCRP probabilities of stepping into each.

    Returns ``(children, probs)`` where ``probs[-1]`` is the new-child mass.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if tree.is_leaf(node):
        raise ValueError("leaf nodes have no child distribution")
    kids = tree.children(node)
    a = tree.arrays
    denom = gamma + a.visits[node, brand] + len(kids)
    probs = np.array([(a.visits[c, brand] + 1.0) / denom for c in kids] + [gamma / denom])
    return kids, probs


def path_log_prior(tree: TopicTree, brand: int, path, gamma: float) -> float:
    """Log nCRP prior of ``path`` under the current visit counts.

    Counts must already exclude the sentence being scored. A path ending in
    placeholders branches at its last real node; levels below the branch
    contribute no further factor.
    """
    tree.validate_path(path)
    a = tree.arrays
    lp = 0.0
    for l in range(1, tree.depth):
        if path[l] == NEW:
            return lp + new_child_log_factor(a, brand, path[l - 1], gamma)
        lp += child_log_factor(a, brand, path[l], gamma)
    return lp


def enumerate_candidate_paths(tree: TopicTree) -> list[tuple[int, ...]]:
    """Every existing root-to-leaf path plus one branch under each internal node.

    Candidates come in uid order of their last real node.
    """
    out = []
    for k in tree.nodes():
        chain = [k] + tree.ancestors(k)
        chain.reverse()
        out.append(tuple(chain) + (NEW,) * (tree.depth - len(chain)))
    return out
