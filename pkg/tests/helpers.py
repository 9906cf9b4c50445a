"""Builders shared by several test modules."""

import numpy as np

from mhstm.corpus import Corpus, Review, Vocabulary
from mhstm.inference import FitConfig, GibbsState
from mhstm.sampler import attach_sentence
from mhstm.tree import NEW


def make_corpus(docs, V, n_brands=1):
    """docs: list of (brand, y, [sentence token lists])."""
    vocab = Vocabulary(tuple(f"w{v}" for v in range(V)), np.ones(V, int))
    reviews = tuple(Review(b, y, tuple(tuple(s) for s in sents)) for b, y, sents in docs)
    return Corpus(reviews, vocab, tuple(f"b{i}" for i in range(n_brands)))


def place(state, paths, levels):
    """Attach sentences in order; a path entry ``("s", j)`` reuses sentence j's slot."""
    state.ensure_free(4 * state.config.depth)
    state.tok_level[:] = levels
    for s, spec in enumerate(paths):
        row = []
        for l, p in enumerate(spec):
            row.append(state.sent_path[p[1], l] if isinstance(p, tuple) else p)
        state.sent_path[s] = row
        assert attach_sentence(s, state.kc, state.tree.arrays, state.urn.arrays, state.ka) == 0
    state.refresh_response()


def truth_state(corpus, truth, config=None):
    """Sampler state holding the generating assignments; returns (state, slot of truth node)."""
    L = truth.tree.depth
    state = GibbsState(corpus, config or FitConfig(depth=L))
    state.ensure_free(truth.tree.n_nodes + L)
    slot = {0: state.tree.root}
    state.tok_level[:] = truth.tok_level
    for s, tpath in enumerate(truth.sent_path):
        state.sent_path[s] = [slot.get(int(k), NEW) for k in tpath]
        assert attach_sentence(s, state.kc, state.tree.arrays, state.urn.arrays, state.ka) == 0
        for k, placed in zip(tpath, state.sent_path[s]):
            slot[int(k)] = int(placed)
    state.refresh_response()
    return state, slot
