"""Synthetic brand-tagged corpora drawn from a known topic hierarchy."""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, Review, Vocabulary
from .errors import ConfigError


def parse_hierarchy(text: str):
    """Parse ``n(t1,...,tn)`` notation into nested tuples of children.

    A bare integer ``t`` stands for a node with ``t`` leaf children, so
    ``"3(3,2,4)"`` is a root with three children holding 3, 2 and 4 leaves.
    Nesting is allowed: ``"2(2(1,1),1(3))"``.
    """
    tokens = re.findall(r"\d+|[(),]", text.replace(" ", ""))
    if "".join(tokens) != text.replace(" ", ""):
        raise ConfigError(f"bad hierarchy string {text!r}")
    pos = 0

    def node():
        nonlocal pos
        if pos >= len(tokens) or not tokens[pos].isdigit():
            raise ConfigError(f"bad hierarchy string {text!r}")
        n = int(tokens[pos])
        pos += 1
        if n < 1:
            raise ConfigError("every branching count must be >= 1")
        if pos < len(tokens) and tokens[pos] == "(":
            pos += 1
            kids = [node()]
            while tokens[pos] == ",":
                pos += 1
                kids.append(node())
            if tokens[pos] != ")":
                raise ConfigError(f"bad hierarchy string {text!r}")
            pos += 1
            if len(kids) != n:
                raise ConfigError(f"{text!r}: {n} branches declared, {len(kids)} given")
            return tuple(kids)
        return tuple(() for _ in range(n))

    try:
        out = node()
    except IndexError:
        raise ConfigError(f"bad hierarchy string {text!r}") from None
    if pos != len(tokens):
        raise ConfigError(f"trailing input in hierarchy string {text!r}")
    return out


@dataclass(frozen=True)
class TruthTree:
    parent: np.ndarray  # parent[0] == -1; nodes in breadth-first order
    level: np.ndarray

    @classmethod
    def from_nested(cls, nested) -> "TruthTree":
        parent, level = [-1], [0]
        queue = [(0, nested)]
        while queue:
            k, kids = queue.pop(0)
            for sub in kids:
                parent.append(k)
                level.append(level[k] + 1)
                queue.append((len(parent) - 1, sub))
        tree = cls(np.array(parent, np.int64), np.array(level, np.int64))
        depths = {int(tree.level[k]) for k in tree.leaves}
        if len(depths) != 1:
            raise ConfigError("all leaves of a hierarchy must sit at the same depth")
        return tree

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    @property
    def depth(self) -> int:
        return int(self.level.max()) + 1

    @property
    def leaves(self) -> list[int]:
        has_child = np.zeros(self.n_nodes, bool)
        has_child[self.parent[1:]] = True
        return [int(k) for k in np.flatnonzero(~has_child)]

    def children(self, k: int) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.parent == k)]

    def path_to(self, k: int) -> list[int]:
        out = [k]
        while self.parent[out[-1]] >= 0:
            out.append(int(self.parent[out[-1]]))
        return out[::-1]


@dataclass
class HierarchySpec:
    hierarchy: str = "3(3,2,4)"
    n_terms: int = 100
    eta: float = 0.1
    alpha: float = 1.0
    sigma: tuple[float, ...] = (1.0, 2.0, 3.0)
    mu: float = 0.0
    rho: float = 1.0
    n_brands: int = 10
    docs_per_brand: int = 200
    sentences_per_doc: int = 5
    mean_sentence_length: float = 10.0
    clip: bool = True
    path_mode: str = "fixed"  # "fixed" truth tree, or "ncrp" grown per brand
    gamma: float = 1.0
    depth: int = 3  # used by path_mode="ncrp"

    def validate(self) -> "HierarchySpec":
        if self.n_terms < 1 or self.n_brands < 1 or self.docs_per_brand < 1 or self.sentences_per_doc < 1:
            raise ConfigError("sizes must be positive")
        if self.eta <= 0 or self.alpha <= 0 or self.rho < 0 or self.mean_sentence_length <= 0:
            raise ConfigError("eta, alpha, mean length must be positive; rho non-negative")
        if any(s < 0 for s in self.sigma):
            raise ConfigError("sigma entries must be non-negative")
        if self.path_mode not in ("fixed", "ncrp"):
            raise ConfigError(f"unknown path mode {self.path_mode!r}")
        depth = self.depth if self.path_mode == "ncrp" else TruthTree.from_nested(parse_hierarchy(self.hierarchy)).depth
        if len(self.sigma) < depth:
            raise ConfigError(f"sigma needs one entry per level ({depth})")
        return self


@dataclass
class GroundTruth:
    tree: TruthTree
    phi: np.ndarray  # (K, V)
    beta: np.ndarray  # (B, K)
    path_dist: np.ndarray | None = None  # (B, n_leaves) over tree.leaves
    sent_path: np.ndarray | None = None  # (S, L) truth node ids
    tok_level: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def tok_topic(self) -> np.ndarray:
        tok_sent = np.repeat(np.arange(len(self.sent_path)), self.metadata["sentence_lengths"])
        return self.sent_path[tok_sent, self.tok_level]

    @property
    def leaf_scores(self) -> np.ndarray:
        """True brand coefficients at each leaf, (B, n_leaves)."""
        return self.beta[:, self.tree.leaves]

    def to_dict(self) -> dict:
        out = {
            "format": "mhstm-truth",
            "version": 1,
            "tree": {"parent": self.tree.parent.tolist(), "level": self.tree.level.tolist()},
            "phi": self.phi.tolist(),
            "beta": self.beta.tolist(),
            "path_dist": None if self.path_dist is None else self.path_dist.tolist(),
            "metadata": self.metadata,
        }
        if self.sent_path is not None:
            out["assignments"] = {"paths": self.sent_path.tolist(), "levels": self.tok_level.tolist()}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruth":
        from .errors import DataError

        if data.get("format") != "mhstm-truth":
            raise DataError("not an exported ground-truth file")
        tree = TruthTree(np.array(data["tree"]["parent"], np.int64), np.array(data["tree"]["level"], np.int64))
        asg = data.get("assignments")
        return cls(
            tree=tree,
            phi=np.array(data["phi"]),
            beta=np.array(data["beta"]),
            path_dist=None if data.get("path_dist") is None else np.array(data["path_dist"]),
            sent_path=None if asg is None else np.array(asg["paths"], np.int64),
            tok_level=None if asg is None else np.array(asg["levels"], np.int64),
            metadata=dict(data.get("metadata", {})),
        )


def build_truth_hierarchy(spec: HierarchySpec, rng: np.random.Generator):
    """Truth tree, topic-word distributions and brand coefficients."""
    spec.validate()
    tree = TruthTree.from_nested(parse_hierarchy(spec.hierarchy))
    phi = rng.dirichlet(np.full(spec.n_terms, spec.eta), size=tree.n_nodes)
    sigma = np.asarray(spec.sigma, float)[tree.level]
    beta = spec.mu + sigma * rng.standard_normal((spec.n_brands, tree.n_nodes))
    return tree, phi, beta


def draw_brand_path_distributions(tree: TruthTree, n_brands: int, rng: np.random.Generator) -> np.ndarray:
    return rng.dirichlet(np.ones(len(tree.leaves)), size=n_brands)


def _sentence_lengths(rng, n, mean):
    return np.maximum(rng.poisson(mean, size=n), 2)


def _draw_levels(rng, alpha, depth, lengths):
    theta = rng.dirichlet(np.full(depth, alpha), size=len(lengths))
    cum = np.cumsum(theta, axis=1)
    cum[:, -1] = 1.0
    owner = np.repeat(np.arange(len(lengths)), lengths)
    u = rng.random(len(owner))
    return (u[:, None] > cum[owner]).sum(axis=1)


def _draw_words(rng, phi, topics):
    words = np.empty(len(topics), np.int64)
    for k in np.unique(topics):
        idx = np.flatnonzero(topics == k)
        words[idx] = rng.choice(phi.shape[1], size=len(idx), p=phi[k])
    return words


def _ncrp_paths(spec, rng, n_sentences_per_brand):
    """Grow a tree by per-brand nested CRP draws; returns parent/level lists
    and the per-brand arrays of sentence paths."""
    L = spec.depth
    parent, level = [-1], [0]
    visits: dict[tuple[int, int], int] = {}
    paths = []
    for b in range(spec.n_brands):
        rows = []
        for _ in range(n_sentences_per_brand):
            path = [0]
            for l in range(1, L):
                cur = path[-1]
                kids = [k for k in range(len(parent)) if parent[k] == cur]
                w = np.array([visits.get((b, k), 0) + 1.0 for k in kids] + [spec.gamma])
                j = rng.choice(len(w), p=w / w.sum())
                if j == len(kids):
                    parent.append(cur)
                    level.append(l)
                    path.append(len(parent) - 1)
                else:
                    path.append(kids[j])
            for k in path:
                visits[(b, k)] = visits.get((b, k), 0) + 1
            rows.append(path)
        paths.append(np.array(rows, np.int64))
    return np.array(parent, np.int64), np.array(level, np.int64), paths


def generate_corpus(spec: HierarchySpec, rng: np.random.Generator, truth: GroundTruth | None = None):
    """Draw a corpus and its token-level ground truth.

    In ``fixed`` mode sentence paths come from per-brand distributions over
    the leaves of a fixed truth tree (drawn here unless ``truth`` is given).
    In ``ncrp`` mode the tree grows by per-brand nested CRP draws.
    Responses are Gaussian around the review's topic proportions times the
    brand coefficients, clipped to [0, 1] unless ``spec.clip`` is off.
    """
    spec.validate()
    B, D, S_d = spec.n_brands, spec.docs_per_brand, spec.sentences_per_doc
    n_sent = D * S_d
    if spec.path_mode == "ncrp":
        parent, level, brand_paths = _ncrp_paths(spec, rng, n_sent)
        tree = TruthTree(parent, level)
        phi = rng.dirichlet(np.full(spec.n_terms, spec.eta), size=tree.n_nodes)
        beta = spec.mu + np.asarray(spec.sigma, float)[tree.level] * rng.standard_normal((B, tree.n_nodes))
        truth = GroundTruth(tree, phi, beta)
    else:
        if truth is None:
            tree, phi, beta = build_truth_hierarchy(spec, rng)
            truth = GroundTruth(tree, phi, beta, draw_brand_path_distributions(tree, B, rng))
        elif truth.path_dist is None:
            truth = dataclasses.replace(truth, path_dist=draw_brand_path_distributions(truth.tree, B, rng))
        leaves = np.array(truth.tree.leaves)
        leaf_paths = np.array([truth.tree.path_to(k) for k in leaves])
        brand_paths = [leaf_paths[rng.choice(len(leaves), size=n_sent, p=truth.path_dist[b])] for b in range(B)]
    tree = truth.tree
    L = tree.depth

    sent_path = np.concatenate(brand_paths)  # brand-major, then doc, then sentence
    lengths = _sentence_lengths(rng, len(sent_path), spec.mean_sentence_length)
    tok_level = _draw_levels(rng, spec.alpha, L, lengths)
    tok_sent = np.repeat(np.arange(len(sent_path)), lengths)
    topics = sent_path[tok_sent, tok_level]
    words = _draw_words(rng, truth.phi, topics)

    n_docs = B * D
    tok_doc = tok_sent // S_d
    doc_brand = np.repeat(np.arange(B), D)
    doc_ntok = np.bincount(tok_doc, minlength=n_docs)
    xb = np.bincount(tok_doc, weights=truth.beta[doc_brand[tok_doc], topics], minlength=n_docs) / doc_ntok
    y = xb + spec.rho * rng.standard_normal(n_docs)
    if spec.clip:
        y = np.clip(y, 0.0, 1.0)

    sent_bounds = np.concatenate([[0], np.cumsum(lengths)])
    reviews = []
    for d in range(n_docs):
        sents = tuple(
            tuple(words[sent_bounds[s] : sent_bounds[s + 1]].tolist()) for s in range(d * S_d, (d + 1) * S_d)
        )
        reviews.append(Review(int(doc_brand[d]), float(y[d]), sents))
    doc_terms = np.zeros((n_docs, spec.n_terms), bool)
    doc_terms[tok_doc, words] = True
    vocab = Vocabulary(tuple(f"t{v:03d}" for v in range(spec.n_terms)), doc_terms.sum(0).astype(np.int64))
    meta = {"generator": "synthetic", "spec": _spec_dict(spec)}
    corpus = Corpus(tuple(reviews), vocab, tuple(f"brand{b:02d}" for b in range(B)), meta, bounded=spec.clip)
    truth = dataclasses.replace(
        truth,
        sent_path=sent_path,
        tok_level=tok_level,
        metadata={"sentence_lengths": lengths.tolist(), "spec": _spec_dict(spec)},
    )
    return corpus, truth


def _spec_dict(spec: HierarchySpec) -> dict:
    d = dataclasses.asdict(spec)
    d["sigma"] = list(d["sigma"])
    return d


def grid_truth(n_brands: int = 10, sigma=(1.0, 2.0, 3.0), mu: float = 0.0, rng=None) -> GroundTruth:
    """The 3x3 grid hierarchy: uniform root, one row per child, one cell per leaf."""
    tree = TruthTree.from_nested(parse_hierarchy("3(3,3,3)"))
    phi = np.zeros((tree.n_nodes, 9))
    phi[0] = 1.0 / 9
    for row, mid in enumerate(tree.children(0)):
        phi[mid, 3 * row : 3 * row + 3] = 1.0 / 3
        for col, leaf in enumerate(tree.children(mid)):
            phi[leaf, 3 * row + col] = 1.0
    rng = rng if rng is not None else np.random.default_rng(0)
    beta = mu + np.asarray(sigma, float)[tree.level] * rng.standard_normal((n_brands, tree.n_nodes))
    return GroundTruth(tree, phi, beta)


def generate_grid_corpus(rng: np.random.Generator, **overrides):
    """Ten brands of 200 reviews over a 9-term vocabulary laid out as a 3x3 grid."""
    spec = HierarchySpec(hierarchy="3(3,3,3)", n_terms=9, **overrides)
    truth = grid_truth(spec.n_brands, spec.sigma, spec.mu, rng)
    corpus, truth = generate_corpus(spec, rng, truth)
    terms = tuple(f"r{v // 3}c{v % 3}" for v in range(9))
    corpus = dataclasses.replace(corpus, vocabulary=Vocabulary(terms, corpus.vocabulary.df))
    corpus.metadata["scenario"] = "grid"
    return corpus, truth
