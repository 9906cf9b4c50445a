"""Stochastic EM: Gibbs sweeps over paths and levels, least-squares M-step."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from . import rng as rngmod
from .corpus import Corpus
from .errors import ConfigError, InvariantError
from .sampler import (
    Hyper,
    KAssign,
    KCorpus,
    doc_beta_sums,
    gauss_logpdf,
    initialize_chain,
    level_step,
    level_sweep,
    path_step,
    path_sweep,
    response_log_likelihood,
    word_log_likelihood,
)
from .tree import ERR_CAPACITY, N_ALIVE, OK, TopicTree
from .urn import UrnState, recompute_addition, topic_word_distribution

logger = logging.getLogger(__name__)


@dataclass
class FitConfig:
    depth: int = 3
    gamma: float = 0.01
    alpha: float = 1.0
    eta: float = 0.1
    rho2: float = 0.5
    ridge: float = 1e-6
    max_iters: int = 500
    epsilon: float | None = 1e-4  # per-token LL gain; None never stops early
    burnin: int = 50
    seed: int = 0
    zero_root: bool = True
    average_last: int = 0  # >0: average topic-word estimates over the last n sweeps
    audit_every: int = 0

    def validate(self) -> "FitConfig":
        if self.depth < 2:
            raise ConfigError("depth must be >= 2 (root plus at least one level of children)")
        for name in ("gamma", "alpha", "eta", "rho2"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.ridge < 0:
            raise ConfigError("ridge must be non-negative")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.burnin < 0 or self.average_last < 0 or self.audit_every < 0:
            raise ConfigError("burnin, average_last and audit_every must be non-negative")
        return self

    @property
    def hyper(self) -> Hyper:
        return Hyper(float(self.gamma), float(self.alpha), float(self.eta), float(self.rho2))


class GibbsState:
    """Mutable sampler state of one chain over one corpus."""

    def __init__(self, corpus: Corpus, config: FitConfig, capacity: int = 64):
        self.corpus = corpus
        self.config = config
        ca = corpus.arrays
        self.ca = ca
        self.kc = KCorpus(ca.words, ca.sent_start, ca.sent_doc, ca.doc_brand, ca.doc_y, ca.doc_ntok)
        L = config.depth
        self.tree = TopicTree(L, corpus.n_brands, capacity)
        self.urn = UrnState(self.tree.capacity, corpus.n_terms)
        self.sent_path = np.full((ca.n_sentences, L), -1, np.int64)
        self.tok_level = np.zeros(ca.n_tokens, np.int64)
        self.rec = np.zeros((ca.n_tokens, max(L - 1, 1)))
        self.beta = np.zeros((corpus.n_brands, self.tree.capacity))
        self.dbs = np.zeros(len(corpus))

    @property
    def hyper(self) -> Hyper:
        return self.config.hyper

    @property
    def ka(self) -> KAssign:
        return KAssign(self.sent_path, self.tok_level, self.rec, self.beta, self.dbs)

    def grow(self, capacity: int) -> None:
        self.tree.grow(capacity)
        self.urn.grow(self.tree.capacity)
        beta = np.zeros((self.beta.shape[0], self.tree.capacity))
        beta[:, : self.beta.shape[1]] = self.beta
        self.beta = beta

    def ensure_free(self, n: int) -> None:
        if self.tree.n_free < n:
            self.grow(max(2 * self.tree.capacity, self.tree.capacity + n))

    def refresh_response(self) -> None:
        self.dbs[:] = doc_beta_sums(self.kc, self.ka)

    def token_nodes(self) -> np.ndarray:
        return self.sent_path[self.ca.tok_sent, self.tok_level]

    # -- sweeps ----------------------------------------------------------
    def initialize(self, rng: np.random.Generator) -> None:
        self.ensure_free(self.config.depth)
        code = initialize_chain(rng.random(self.ca.n_tokens), self.kc, self.tree.arrays, self.urn.arrays, self.ka)
        if code != OK:
            raise InvariantError(f"initialization failed with code {code}")

    def sweep_paths(self, rng: np.random.Generator) -> None:
        u = rng.random(self.ca.n_sentences)
        start = 0
        while True:
            self.ensure_free(self.config.depth - 1)
            code, start = path_sweep(start, u, self.kc, self.tree.arrays, self.urn.arrays, self.ka, self.hyper)
            if code == ERR_CAPACITY:
                self.grow(2 * self.tree.capacity)
                continue
            if code != OK:
                raise InvariantError(f"path sweep failed at sentence {start} with code {code}")
            return

    def sweep_levels(self, rng: np.random.Generator) -> None:
        code = level_sweep(rng.random(self.ca.n_tokens), self.kc, self.urn.arrays, self.ka, self.hyper)
        if code != OK:
            raise InvariantError(f"level sweep failed with code {code}")

    def recompute_addition(self) -> None:
        recompute_addition(self.tree.arrays, self.urn.arrays, self.config.depth)


# ---------------------------------------------------------------------------
# single-site steps (library surface; the sweeps call the same kernels)
# ---------------------------------------------------------------------------


def sample_path(state: GibbsState, s: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Resample the path of sentence ``s``; returns the new path (slots)."""
    state.ensure_free(state.config.depth - 1)
    C = state.tree.capacity
    bufs = [np.empty(C) for _ in range(4)]
    code = path_step(s, rng.random(), state.kc, state.tree.arrays, state.urn.arrays, state.ka, state.hyper, *bufs)
    if code != OK:
        raise InvariantError(f"path step failed with code {code}")
    return tuple(state.sent_path[s].tolist())


def sample_level(state: GibbsState, t: int, rng: np.random.Generator) -> int:
    s = int(state.ca.tok_sent[t])
    L = state.config.depth
    lo, hi = state.ca.sent_start[s], state.ca.sent_start[s + 1]
    nl = np.bincount(state.tok_level[lo:hi], minlength=L).astype(np.int64)
    code = level_step(t, s, rng.random(), state.kc, state.urn.arrays, state.ka, state.hyper, nl, np.empty(L))
    if code != OK:
        raise InvariantError(f"level step failed with code {code}")
    return int(state.tok_level[t])


# ---------------------------------------------------------------------------
# regression
# ---------------------------------------------------------------------------


def response_log_density(y: float, x: np.ndarray, beta_b: np.ndarray, rho2: float) -> float:
    if rho2 <= 0:
        raise ValueError("rho2 must be positive")
    return float(gauss_logpdf(float(y), float(np.dot(x, beta_b)), float(rho2)))


def empirical_topic_proportions(state: GibbsState, d: int) -> np.ndarray:
    """Fraction of review ``d``'s tokens at each node slot."""
    ca = state.ca
    nd = ca.doc_ntok[d]
    if nd == 0:
        raise ValueError(f"review {d} has no tokens")
    s0, s1 = ca.doc_sent_start[d], ca.doc_sent_start[d + 1]
    lo, hi = ca.sent_start[s0], ca.sent_start[s1]
    nodes = state.token_nodes()[lo:hi]
    return np.bincount(nodes, minlength=state.tree.capacity) / nd


def design_matrix(state: GibbsState) -> tuple[sparse.csr_matrix, np.ndarray]:
    """Sparse (review x live non-root node) matrix of topic proportions."""
    cols = np.array([k for k in state.tree.nodes() if k != state.tree.root], dtype=np.int64)
    col_of = np.full(state.tree.capacity, -1, np.int64)
    col_of[cols] = np.arange(len(cols))
    nodes = state.token_nodes()
    docs = state.ca.tok_doc
    keep = col_of[nodes] >= 0
    data = 1.0 / state.ca.doc_ntok[docs[keep]]
    X = sparse.csr_matrix((data, (docs[keep], col_of[nodes[keep]])), shape=(len(state.corpus), len(cols)))
    return X, cols


def solve_brand_regression(X, y: np.ndarray, ridge: float) -> np.ndarray:
    """argmin ||y - X b||^2 + ridge ||b||^2."""
    X = X.toarray() if sparse.issparse(X) else np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if ridge == 0:
        return np.linalg.lstsq(X, y, rcond=None)[0]
    G = X.T @ X + ridge * np.eye(X.shape[1])
    return np.linalg.solve(G, X.T @ y)


def optimize_beta(state: GibbsState) -> np.ndarray:
    """Per-brand least squares of responses on topic proportions.

    Brands decouple since each review belongs to one brand. The root
    coefficient stays at zero when ``zero_root`` is set.
    """
    cfg = state.config
    X, cols = design_matrix(state)
    y = state.ca.doc_y
    brand = state.ca.doc_brand
    beta = np.zeros_like(state.beta)
    if not cfg.zero_root:
        root_x = np.bincount(state.ca.tok_doc[state.token_nodes() == state.tree.root], minlength=len(y))
        X = sparse.hstack([sparse.csr_matrix(root_x / state.ca.doc_ntok).T, X]).tocsr()
        cols = np.concatenate([[state.tree.root], cols])
    for b in range(state.corpus.n_brands):
        rows = np.flatnonzero(brand == b)
        if len(rows) == 0 or X.shape[1] == 0:
            continue
        beta[b, cols] = solve_brand_regression(X[rows], y[rows], cfg.ridge)
    return beta


def joint_log_likelihood(state: GibbsState) -> float:
    """Leave-one-out word log predictive plus response log density."""
    state.refresh_response()
    words = word_log_likelihood(state.tree.arrays, state.urn.arrays, state.config.eta)
    return float(words + response_log_likelihood(state.kc, state.ka, state.config.rho2))


# ---------------------------------------------------------------------------
# auditing
# ---------------------------------------------------------------------------


def audit_state(state: GibbsState) -> None:
    """Recount everything from the assignments; raise on any mismatch."""
    tree, urn, ca = state.tree, state.urn, state.ca
    a = tree.arrays
    L = state.config.depth
    alive = np.zeros(tree.capacity, bool)
    alive[tree.nodes()] = True
    if (a.level[alive] >= L).any():
        raise InvariantError("node deeper than the tree depth")
    for k in tree.nodes():
        p = a.parent[k]
        if k == tree.root:
            if p != -1 or a.level[k] != 0:
                raise InvariantError("root malformed")
        elif not alive[p] or a.level[p] != a.level[k] - 1:
            raise InvariantError(f"orphan or misleveled node {tree.uid(k)}")
    nchild = np.bincount(a.parent[alive & (a.parent >= 0)], minlength=tree.capacity)
    if not np.array_equal(nchild[alive], a.nchild[alive]):
        raise InvariantError("child counts out of sync")

    sp = state.sent_path
    if (sp < 0).any() or not alive[sp].all():
        raise InvariantError("sentence assigned to a dead node")
    if not (a.parent[sp[:, 1:]] == sp[:, :-1]).all():
        raise InvariantError("sentence path breaks a parent-child edge")
    brand = ca.doc_brand[ca.sent_doc]
    visits = np.zeros_like(a.visits)
    np.add.at(visits, (sp.ravel(), np.repeat(brand, L)), 1)
    if not np.array_equal(visits[alive], a.visits[alive]) or not np.array_equal(visits.sum(1), a.totvis * alive):
        raise InvariantError("visit counts out of sync")
    if (a.totvis[alive] == 0).any():
        raise InvariantError("unvisited node survived pruning")

    nodes = state.token_nodes()
    N = np.zeros_like(urn.N)
    np.add.at(N, (nodes, ca.words), 1)
    if not np.array_equal(N, urn.N) or not np.array_equal(N.sum(1), urn.Ntot):
        raise InvariantError("raw counts out of sync")
    W = N.astype(float)
    tok_path = sp[ca.tok_sent]
    for j in range(L - 1):
        m = state.tok_level > j
        np.add.at(W, (tok_path[m, j], ca.words[m]), state.rec[m, j])
    if not np.array_equal(W, urn.W):
        raise InvariantError("weights differ from counts plus recorded ancestor weights")
    if not np.array_equal(W.sum(1), urn.Wsum):
        raise InvariantError("weight totals out of sync")
    if (urn.A < 0).any() or (urn.A > 1).any():
        raise InvariantError("addition weight outside [0, 1]")


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


@dataclass
class IterationStats:
    iteration: int
    log_likelihood: float
    n_nodes: int
    n_leaves: int
    path_seconds: float
    level_seconds: float
    addition_seconds: float
    mstep_seconds: float


class _TopicAverager:
    """Running window of topic-word estimates keyed by node uid."""

    def __init__(self, window: int):
        self.snapshots = deque(maxlen=window)

    def add(self, state: GibbsState) -> None:
        nodes = state.tree.nodes()
        uids = [state.tree.uid(k) for k in nodes]
        phi = np.stack([topic_word_distribution(state.urn, state.config.eta, k) for k in nodes])
        self.snapshots.append(dict(zip(uids, phi)))

    def result(self) -> dict[int, np.ndarray]:
        acc: dict[int, list] = {}
        for snap in self.snapshots:
            for uid, phi in snap.items():
                acc.setdefault(uid, []).append(phi)
        return {uid: np.mean(v, axis=0) for uid, v in acc.items()}


def run_stochastic_em(corpus: Corpus, config: FitConfig | None = None, progress=None) -> "Model":
    """Fit the model by alternating Gibbs sweeps and the least-squares M-step.

    Each iteration resamples every sentence path, then every token level,
    refreshes the addition weights and refits the brand coefficients. The
    chain stops once the per-token log-likelihood gain drops below
    ``epsilon`` (checked only after burn-in) or at ``max_iters``.
    """
    config = (config or FitConfig()).validate()
    state = GibbsState(corpus, config)
    rng = rngmod.stream(config.seed, "chain")
    state.initialize(rng)
    T = corpus.arrays.n_tokens
    stats: list[IterationStats] = []
    averager = _TopicAverager(config.average_last) if config.average_last else None
    prev = None
    converged = False
    for it in range(1, config.max_iters + 1):
        t0 = time.perf_counter()
        state.sweep_paths(rng)
        t1 = time.perf_counter()
        state.sweep_levels(rng)
        t2 = time.perf_counter()
        state.recompute_addition()
        t3 = time.perf_counter()
        state.beta = optimize_beta(state)
        ll = joint_log_likelihood(state)
        t4 = time.perf_counter()
        n_nodes = len(state.tree)
        stats.append(
            IterationStats(it, ll, n_nodes, int((state.tree.arrays.level[state.tree.nodes()] == config.depth - 1).sum()),
                           t1 - t0, t2 - t1, t3 - t2, t4 - t3)
        )
        if config.audit_every and it % config.audit_every == 0:
            audit_state(state)
        if averager is not None and it > config.burnin:
            averager.add(state)
        logger.debug("iter %d  ll/token %.5f  nodes %d", it, ll / T, n_nodes)
        if progress is not None:
            progress(stats[-1])
        if config.epsilon is not None and prev is not None and it > config.burnin:
            if (ll - prev) / T < config.epsilon:
                converged = True
                break
        prev = ll
    if config.audit_every:
        audit_state(state)
    model = Model.from_state(state, stats, converged)
    if averager is not None:
        model.phi_average = averager.result()
    return model


# ---------------------------------------------------------------------------
# fitted model
# ---------------------------------------------------------------------------


MODEL_FORMAT = "mhstm-model"


@dataclass
class Model:
    config: FitConfig
    terms: tuple[str, ...]
    brands: tuple[str, ...]
    tree: TopicTree
    urn: UrnState
    beta: np.ndarray  # (B, capacity) by node slot
    sent_path: np.ndarray | None = None
    tok_level: np.ndarray | None = None
    stats: list[IterationStats] = field(default_factory=list)
    converged: bool = False
    phi_average: dict[int, np.ndarray] | None = None

    @classmethod
    def from_state(cls, state: GibbsState, stats=(), converged=False) -> "Model":
        return cls(
            config=state.config,
            terms=state.corpus.vocabulary.terms,
            brands=state.corpus.brands,
            tree=state.tree,
            urn=state.urn,
            beta=state.beta,
            sent_path=state.sent_path,
            tok_level=state.tok_level,
            stats=list(stats),
            converged=converged,
        )

    @property
    def depth(self) -> int:
        return self.tree.depth

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    @property
    def log_likelihood_trace(self) -> list[float]:
        return [s.log_likelihood for s in self.stats]

    def topic_word(self, k: int) -> np.ndarray:
        if self.phi_average is not None:
            phi = self.phi_average.get(self.tree.uid(k))
            if phi is not None:
                return phi
        return topic_word_distribution(self.urn, self.config.eta, k)

    def top_terms(self, k: int, n: int = 10) -> list[tuple[int, float]]:
        phi = self.topic_word(k)
        order = np.lexsort((np.arange(len(phi)), -phi))[:n]
        return [(int(v), float(phi[v])) for v in order]

    def token_nodes(self, corpus: Corpus) -> np.ndarray:
        if self.sent_path is None or self.tok_level is None:
            raise ValueError("model carries no assignments")
        ca = corpus.arrays
        if len(self.sent_path) != ca.n_sentences or len(self.tok_level) != ca.n_tokens:
            raise ValueError("model assignments do not match this corpus")
        return self.sent_path[ca.tok_sent, self.tok_level]

    # -- export ----------------------------------------------------------
    def to_dict(self, include_assignments: bool = True, top_n: int = 10) -> dict:
        tree = self.tree
        nodes = tree.nodes()
        uid = tree.uid
        W_entries, N_entries = [], []
        for k in nodes:
            for v in np.flatnonzero(self.urn.W[k]):
                W_entries.append([uid(k), int(v), float(self.urn.W[k, v])])
            for v in np.flatnonzero(self.urn.N[k]):
                N_entries.append([uid(k), int(v), int(self.urn.N[k, v])])
        out = {
            "format": MODEL_FORMAT,
            "version": 1,
            "config": dataclasses.asdict(self.config),
            "vocabulary": list(self.terms),
            "brands": list(self.brands),
            "tree": tree.to_dict(),
            "topics": [
                {"id": uid(k), "top_terms": [[self.terms[v], p] for v, p in self.top_terms(k, top_n)]}
                for k in nodes
            ],
            "W": W_entries,
            "N": N_entries,
            "A": [[uid(k), int(v), float(self.urn.A[k, v])] for k in nodes for v in np.flatnonzero(self.urn.A[k])],
            "beta": {str(uid(k)): self.beta[:, k].tolist() for k in nodes},
            "log_likelihood": self.log_likelihood_trace,
            "iterations": len(self.stats),
            "converged": self.converged,
        }
        if self.phi_average is not None:
            out["phi_average"] = {str(u): p.tolist() for u, p in sorted(self.phi_average.items())}
        if include_assignments and self.sent_path is not None:
            out["assignments"] = {
                "paths": [[uid(k) for k in row] for row in self.sent_path.tolist()],
                "levels": self.tok_level.tolist(),
            }
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Model":
        from .errors import DataError

        if data.get("format") != MODEL_FORMAT:
            raise DataError("not an exported model file")
        cfg = FitConfig(**data["config"])
        terms = tuple(data["vocabulary"])
        brands = tuple(data["brands"])
        t = data["tree"]
        nodes = t["nodes"]
        tree = TopicTree(t["depth"], t["n_brands"], capacity=len(nodes) + t["depth"])
        a = tree.arrays
        slot = {nodes[0]["id"]: tree.root}
        # rebuild with original uids: node list is in uid order, parents first
        a.uid[tree.root] = nodes[0]["id"]
        a.visits[tree.root] = nodes[0]["visits"]
        a.totvis[tree.root] = sum(nodes[0]["visits"])
        from .tree import new_node

        for n in nodes[1:]:
            k = new_node(a, slot[n["parent"]], n["level"])
            a.uid[k] = n["id"]
            a.visits[k] = n["visits"]
            a.totvis[k] = sum(n["visits"])
            slot[n["id"]] = k
        a.meta[2] = max(slot) + 1
        urn = UrnState(tree.capacity, len(terms))
        for u_, v, w in data["W"]:
            urn.W[slot[u_], v] = w
        for u_, v, c in data["N"]:
            urn.N[slot[u_], v] = c
        for u_, v, w in data.get("A", []):
            urn.A[slot[u_], v] = w
        urn.Wsum[:] = urn.W.sum(1)
        urn.Ntot[:] = urn.N.sum(1)
        beta = np.zeros((len(brands), tree.capacity))
        for u_, vals in data["beta"].items():
            beta[:, slot[int(u_)]] = vals
        model = cls(cfg, terms, brands, tree, urn, beta, converged=data.get("converged", False))
        model.stats = [IterationStats(i + 1, ll, 0, 0, 0.0, 0.0, 0.0, 0.0) for i, ll in enumerate(data["log_likelihood"])]
        if "phi_average" in data:
            model.phi_average = {int(u_): np.array(p) for u_, p in data["phi_average"].items()}
        if "assignments" in data:
            asg = data["assignments"]
            model.sent_path = np.array([[slot[u_] for u_ in row] for row in asg["paths"]], dtype=np.int64)
            model.tok_level = np.array(asg["levels"], dtype=np.int64)
        return model


# ---------------------------------------------------------------------------
# hyperparameter search and runtime profiling
# ---------------------------------------------------------------------------


def grid_search(
    train: Corpus,
    heldout: Corpus,
    config: FitConfig,
    gammas: Sequence[float] = (0.003, 0.01, 0.03),
    alphas: Sequence[float] = (0.5, 1.0, 2.0),
    num_particles: int = 200,
) -> tuple[FitConfig, list[tuple[float, float, float]]]:
    """Pick (gamma, alpha) by held-out per-word log-likelihood."""
    from .evaluation import held_out_likelihood

    results = []
    for g in gammas:
        for a in alphas:
            cfg = dataclasses.replace(config, gamma=g, alpha=a)
            model = run_stochastic_em(train, cfg)
            results.append((g, a, held_out_likelihood(model, heldout, num_particles, seed=config.seed)))
    g, a, _ = max(results, key=lambda r: r[2])
    return dataclasses.replace(config, gamma=g, alpha=a), results


def estep_runtime_profile(
    corpus: Corpus, config: FitConfig, depths: Sequence[int], iterations: int = 5, warmup: int = 2
) -> list[dict]:
    """Wall time of the path and level sweeps at each tree depth.

    Each depth runs ``warmup + iterations`` fixed iterations; only the last
    ``iterations`` are timed. Reports seconds per iteration.
    """
    rows = []
    for L in depths:
        cfg = dataclasses.replace(config, depth=L, max_iters=warmup + iterations, epsilon=None, average_last=0)
        model = run_stochastic_em(corpus, cfg)
        timed = model.stats[warmup:]
        path = sum(s.path_seconds for s in timed) / len(timed)
        level = sum(s.level_seconds for s in timed) / len(timed)
        rows.append({"depth": L, "path_seconds": path, "level_seconds": level, "estep_seconds": path + level,
                     "n_nodes": timed[-1].n_nodes})
    return rows


def addition_update_seconds(tree: TopicTree, urn: UrnState, repeats: int = 200) -> float:
    """Best-of-five mean time of one addition-matrix refresh."""
    recompute_addition(tree.arrays, urn.arrays, tree.depth)
    best = math.inf
    for _ in range(5):
        t0 = time.perf_counter()
        for _ in range(repeats):
            recompute_addition(tree.arrays, urn.arrays, tree.depth)
        best = min(best, (time.perf_counter() - t0) / repeats)
    return best
