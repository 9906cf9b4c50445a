"""Brand-ranking metrics, topic-quality metrics and held-out likelihood."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from . import rng as rngmod
from .corpus import Corpus
from .errors import DataError
from .tree import child_log_factor


# ---------------------------------------------------------------------------
# rankings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BrandRanking:
    leaf: int
    brands: tuple[int, ...]  # best first
    scores: tuple[float, ...]

    def __post_init__(self):
        if any(a < b for a, b in zip(self.scores, self.scores[1:])):
            raise ValueError("scores must be non-increasing")


def order_by_score(scores) -> np.ndarray:
    """Indices sorted by descending score, lower index first on ties."""
    scores = np.asarray(scores, float)
    return np.lexsort((np.arange(len(scores)), -scores))


def rank_brands(model, leaf: int) -> BrandRanking:
    if leaf not in set(model.tree.nodes()):
        raise KeyError(f"unknown node {leaf}")
    scores = model.beta[:, leaf]
    order = order_by_score(scores)
    return BrandRanking(int(leaf), tuple(int(b) for b in order), tuple(float(scores[b]) for b in order))


def _check_pair(a, b):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("rankings must be 1-d and of equal length")
    if len(a) < 2:
        raise ValueError("need at least two items")
    return a, b


def spearman(a, b) -> float:
    """Pearson correlation of average ranks.

    Returns 0 when either side is constant (no ordering information).
    """
    a, b = _check_pair(a, b)
    ra = rankdata(a) - (len(a) + 1) / 2
    rb = rankdata(b) - (len(b) + 1) / 2
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if den == 0:
        return 0.0
    return float(np.clip((ra @ rb) / den, -1.0, 1.0))


def kendall_tau(a, b) -> float:
    """Tie-corrected Kendall tau-b; 0 when either side is constant."""
    a, b = _check_pair(a, b)
    da = np.sign(a[:, None] - a[None, :])
    db = np.sign(b[:, None] - b[None, :])
    iu = np.triu_indices(len(a), 1)
    da, db = da[iu], db[iu]
    s = float((da * db).sum())
    na = float(np.count_nonzero(da))
    nb = float(np.count_nonzero(db))
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(s / math.sqrt(na * nb), -1.0, 1.0))


def average_precision_at_k(predicted: Sequence, relevant, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    hits = 0
    total = 0.0
    for i, item in enumerate(list(predicted)[:k], start=1):
        if item in relevant:
            hits += 1
            total += hits / i
    return total / min(k, len(relevant))


# ---------------------------------------------------------------------------
# topic alignment
# ---------------------------------------------------------------------------


def contingency(true_labels, learned_labels):
    """Overlap counts between two labelings of the same tokens.

    Returns ``(table, true_ids, learned_ids)`` with rows for true labels.
    """
    t = np.asarray(true_labels)
    s = np.asarray(learned_labels)
    if t.shape != s.shape:
        raise ValueError("label arrays must have the same length")
    tid, ti = np.unique(t, return_inverse=True)
    sid, si = np.unique(s, return_inverse=True)
    table = np.zeros((len(tid), len(sid)), np.int64)
    np.add.at(table, (ti, si), 1)
    return table, tid, sid


def max_weight_matching(table) -> list[tuple[int, int]]:
    """Maximum-total-overlap one-to-one matching of rows to columns.

    The smaller side is padded with zero rows or columns; pairs that land on
    padding are dropped from the result.
    """
    table = np.asarray(table, float)
    n = max(table.shape) if table.size else 0
    padded = np.zeros((n, n))
    padded[: table.shape[0], : table.shape[1]] = table
    rows, cols = linear_sum_assignment(padded, maximize=True)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if r < table.shape[0] and c < table.shape[1]]


def matched_overlap(table) -> float:
    table = np.asarray(table, float)
    return float(sum(table[r, c] for r, c in max_weight_matching(table)))


def topic_accuracy(true_assignments, learned_assignments) -> float:
    table, _, _ = contingency(true_assignments, learned_assignments)
    total = table.sum()
    if total == 0:
        return 0.0
    return matched_overlap(table) / total


# ---------------------------------------------------------------------------
# topic quality
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Coherence:
    score: float
    terms: tuple[int, ...]
    partial: bool  # fewer than top_n terms carried weight


def coherence_of_terms(terms: Sequence[int], corpus: Corpus) -> float:
    score = 0.0
    for i in range(1, len(terms)):
        for j in range(i):
            vi, vj = terms[i], terms[j]
            df_j = corpus.document_frequency(vj)
            score += math.log((corpus.co_document_frequency(vi, vj) + 1) / df_j)
    return score


def coherence(model, corpus: Corpus, k: int, top_n: int = 5) -> Coherence:
    """Co-document coherence of the node's ``top_n`` terms ranked by topic weight."""
    if top_n < 2:
        raise ValueError("top_n must be >= 2")
    weighted = model.urn.W[k] > 0
    ranked = [v for v, _ in model.top_terms(k, model.n_terms) if weighted[v]]
    terms = tuple(ranked[:top_n])
    return Coherence(coherence_of_terms(terms, corpus), terms, len(terms) < top_n)


def _cos(a, b) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def hierarchical_affinity(model) -> float:
    """Mean parent-child cosine over mean parent-non-child cosine, taken
    between second-level topics and third-level topics."""
    tree = model.tree
    mids = tree.nodes_at_level(1)
    lows = tree.nodes_at_level(2) if tree.depth > 2 else []
    if len(mids) < 2 or not lows:
        raise DataError("hierarchical affinity needs two second-level nodes and a third level")
    phi = {k: model.topic_word(k) for k in mids + lows}
    near, far = [], []
    for p in mids:
        for c in lows:
            (near if tree.parent(c) == p else far).append(_cos(phi[p], phi[c]))
    if not near or not far:
        raise DataError("hierarchical affinity needs both child and non-child pairs")
    return float(np.mean(near) / max(np.mean(far), 1e-12))


# ---------------------------------------------------------------------------
# held-out likelihood
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HeldOutEstimate:
    log_prob: float  # summed over sentences
    n_tokens: int
    n_dropped: int  # out-of-vocabulary tokens
    num_particles: int

    @property
    def per_word(self) -> float:
        return self.log_prob / self.n_tokens if self.n_tokens else float("nan")


def leaf_paths(tree) -> np.ndarray:
    leaves = tree.leaves()
    return np.array([list(reversed(tree.ancestors(k))) + [k] for k in leaves], np.int64).reshape(len(leaves), tree.depth)


def brand_path_log_prior(tree, brand: int, paths: np.ndarray, gamma: float) -> np.ndarray:
    """nCRP log prior of each existing path for one brand, renormalized so the
    existing paths carry all the mass."""
    lp = np.zeros(len(paths))
    for i, path in enumerate(paths):
        for k in path[1:]:
            lp[i] += child_log_factor(tree.arrays, brand, k, gamma)
    return lp - np.logaddexp.reduce(lp)


@njit(cache=True)
def _sentence_particles(words, paths, cum_prior, W, Wsum, alpha, eta, P, seed, out):
    """Log importance weights of ``P`` prior particles for one sentence."""
    np.random.seed(seed)
    n = words.shape[0]
    L = paths.shape[1]
    V = W.shape[1]
    nl = np.zeros(L)
    lev = np.empty(n, np.int64)
    for p in range(P):
        u = np.random.random()
        j = 0
        while j < cum_prior.shape[0] - 1 and cum_prior[j] < u:
            j += 1
        for l in range(L):
            nl[l] = 0.0
        for i in range(n):
            r = np.random.random() * (i + L * alpha)
            acc = 0.0
            l = L - 1
            for m in range(L):
                acc += nl[m] + alpha
                if r < acc:
                    l = m
                    break
            lev[i] = l
            nl[l] += 1.0
        lw = 0.0
        for i in range(n):
            l = lev[i]
            k = paths[j, l]
            same = 0
            before = 0
            for q in range(i):
                if lev[q] == l:
                    before += 1
                    if words[q] == words[i]:
                        same += 1
            lw += math.log(W[k, words[i]] + eta + same) - math.log(Wsum[k] + V * eta + before)
        out[p] = lw


def held_out_estimate(model, corpus: Corpus, num_particles: int = 2000, seed: int = 0) -> HeldOutEstimate:
    """Importance-sampling estimate of held-out sentence log-probabilities.

    Particles come from the prior: a path from the brand's nCRP restricted to
    existing paths, levels from the sentence-level Dirichlet-multinomial.
    Each is weighted by the sequential word likelihood under the fitted
    topic weights.
    """
    if num_particles < 1:
        raise ValueError("num_particles must be >= 1")
    index = {t: i for i, t in enumerate(model.terms)}
    brand_index = {b: i for i, b in enumerate(model.brands)}
    remap = np.array([index.get(t, -1) for t in corpus.vocabulary.terms], np.int64)
    paths = leaf_paths(model.tree)
    priors = {}
    ca = corpus.arrays
    cfg = model.config
    seeds = rngmod.stream(seed, "held-out").integers(0, 2**31 - 1, size=ca.n_sentences)
    buf = np.empty(num_particles)
    total = 0.0
    n_tokens = 0
    dropped = 0
    for s in range(ca.n_sentences):
        d = ca.sent_doc[s]
        name = corpus.brands[ca.doc_brand[d]]
        if name not in brand_index:
            raise DataError(f"brand {name!r} was not seen in training")
        b = brand_index[name]
        if b not in priors:
            priors[b] = np.cumsum(np.exp(brand_path_log_prior(model.tree, b, paths, cfg.gamma)))
        w = remap[ca.words[ca.sent_start[s]: ca.sent_start[s + 1]]]
        dropped += int((w < 0).sum())
        w = w[w >= 0]
        if len(w) == 0:
            continue
        _sentence_particles(w, paths, priors[b], model.urn.W, model.urn.Wsum, cfg.alpha, cfg.eta,
                            num_particles, int(seeds[s]), buf)
        total += float(np.logaddexp.reduce(buf) - math.log(num_particles))
        n_tokens += len(w)
    return HeldOutEstimate(total, n_tokens, dropped, num_particles)


def held_out_likelihood(model, corpus: Corpus, num_particles: int = 2000, seed: int = 0) -> float:
    """Held-out log-likelihood per word."""
    return held_out_estimate(model, corpus, num_particles, seed).per_word


# ---------------------------------------------------------------------------
# simulation report
# ---------------------------------------------------------------------------


@dataclass
class LeafScore:
    true_leaf: int
    learned_leaf: int | None
    spearman: float
    kendall: float
    ap_at_k: float


@dataclass
class MetricsReport:
    leaves: list[LeafScore]
    topic_accuracy: float
    coherence: float
    hierarchical_affinity: float | None
    held_out: float | None = None
    k: int = 5
    unmatched: list[int] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def alignment_failed(self) -> bool:
        return bool(self.unmatched)

    def _scored(self, attr):
        vals = [getattr(s, attr) for s in self.leaves if s.learned_leaf is not None]
        return np.array(vals, float)

    def mean(self, attr: str) -> float:
        vals = self._scored(attr)
        return float(vals.mean()) if len(vals) else float("nan")

    def stderr(self, attr: str) -> float:
        vals = self._scored(attr)
        return float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else float("nan")

    def summary(self) -> dict:
        out = {
            "spearman": self.mean("spearman"),
            "kendall": self.mean("kendall"),
            f"ap@{self.k}": self.mean("ap_at_k"),
            "topic_accuracy": self.topic_accuracy,
            "coherence": self.coherence,
            "hierarchical_affinity": self.hierarchical_affinity,
        }
        if self.held_out is not None:
            out["held_out_per_word"] = self.held_out
        return out

    def to_dict(self) -> dict:
        return {
            "format": "mhstm-report",
            "summary": self.summary(),
            "stderr": {m: self.stderr(m) for m in ("spearman", "kendall", "ap_at_k")},
            "leaves": [vars(s) for s in self.leaves],
            "unmatched_true_leaves": list(self.unmatched),
            "alignment_failed": self.alignment_failed,
            "metadata": dict(self.metadata),
        }

    def csv_rows(self, scenario: str = "", seed=None) -> list[tuple]:
        seed = self.metadata.get("seed") if seed is None else seed
        return [(scenario, seed, m, v) for m, v in self.summary().items()]


def reports_to_csv(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "seed", "metric", "value"])
    for r in rows:
        w.writerow(["" if x is None else (repr(x) if isinstance(x, float) else x) for x in r])
    return buf.getvalue()


def align_leaves(model, corpus: Corpus, truth) -> dict[int, int]:
    """Match true leaves to learned leaves by overlap of leaf-level tokens."""
    learned = model.token_nodes(corpus)
    true = truth.tok_topic
    true_leaves = set(truth.tree.leaves)
    learned_leaves = set(model.tree.leaves())
    keep = np.isin(true, list(true_leaves)) & np.isin(learned, list(learned_leaves))
    table, tid, sid = contingency(true[keep], learned[keep])
    return {int(tid[r]): int(sid[c]) for r, c in max_weight_matching(table) if table[r, c] > 0}


def multi_aspect_report(model, corpus: Corpus, truth, k: int = 5, top_n: int = 5,
                        heldout: Corpus | None = None, num_particles: int = 2000, seed: int = 0) -> MetricsReport:
    """Score a fitted model against simulation ground truth.

    Each true leaf is a query: brands ranked by the learned coefficients at
    the aligned leaf are compared with the ranking by true coefficients.
    """
    match = align_leaves(model, corpus, truth)
    leaves = []
    unmatched = []
    for tl in truth.tree.leaves:
        true_scores = truth.beta[:, tl]
        relevant = set(order_by_score(true_scores)[:k].tolist())
        ll = match.get(tl)
        if ll is None:
            unmatched.append(int(tl))
            leaves.append(LeafScore(int(tl), None, float("nan"), float("nan"), float("nan")))
            continue
        learned_scores = model.beta[:, ll]
        leaves.append(LeafScore(
            int(tl), int(model.tree.uid(ll)),
            spearman(learned_scores, true_scores),
            kendall_tau(learned_scores, true_scores),
            average_precision_at_k(order_by_score(learned_scores).tolist(), relevant, k),
        ))
    acc = topic_accuracy(truth.tok_topic, model.token_nodes(corpus))
    coh = float(np.mean([coherence(model, corpus, n, top_n).score for n in model.tree.nodes()]))
    try:
        aff = hierarchical_affinity(model)
    except DataError:
        aff = None
    held = held_out_likelihood(model, heldout, num_particles, seed) if heldout is not None else None
    return MetricsReport(leaves, acc, coh, aff, held, k, unmatched, {"seed": model.config.seed})
