"""Numba kernels for the collapsed Gibbs E-step.

All state is passed as namedtuples of arrays (see ``TreeArrays``,
``UrnArrays``, ``KCorpus``, ``KAssign``). Random draws arrive as
pre-generated uniforms so the kernels hold no RNG state of their own.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from numba import njit

from .tree import (
    ERR_CAPACITY,
    ERR_WEIGHT,
    N_ALIVE,
    N_FREE,
    OK,
    attach_path,
    child_log_factor,
    detach_path,
    new_child_log_factor,
    new_node,
    prune_path,
)
from .urn import apply_token, retract_token

LOG_2PI = math.log(2.0 * math.pi)


class KCorpus(NamedTuple):
    words: np.ndarray
    sent_start: np.ndarray
    sent_doc: np.ndarray
    doc_brand: np.ndarray
    doc_y: np.ndarray
    doc_ntok: np.ndarray


class KAssign(NamedTuple):
    sent_path: np.ndarray  # (S, L) node slots
    tok_level: np.ndarray  # (T,)
    rec: np.ndarray  # (T, max(L-1, 1)) ancestor weights applied per token
    beta: np.ndarray  # (B, capacity)
    dbs: np.ndarray  # (D,) sum over a review's tokens of beta at the token's node


class Hyper(NamedTuple):
    gamma: float
    alpha: float
    eta: float
    rho2: float


@njit(cache=True)
def gauss_logpdf(y, mean, rho2):
    r = y - mean
    return -0.5 * (LOG_2PI + math.log(rho2)) - r * r / (2.0 * rho2)


@njit(cache=True)
def _draw(logp, n, uval):
    m = -np.inf
    for i in range(n):
        if logp[i] > m:
            m = logp[i]
    total = 0.0
    for i in range(n):
        logp[i] = math.exp(logp[i] - m)
        total += logp[i]
    target = uval * total
    acc = 0.0
    for i in range(n - 1):
        acc += logp[i]
        if acc > target:
            return i
    return n - 1


@njit(cache=True)
def doc_beta_sums(kc, ka):
    D = kc.doc_y.shape[0]
    out = np.zeros(D)
    S = kc.sent_doc.shape[0]
    for s in range(S):
        d = kc.sent_doc[s]
        b = kc.doc_brand[d]
        for t in range(kc.sent_start[s], kc.sent_start[s + 1]):
            out[d] += ka.beta[b, ka.sent_path[s, ka.tok_level[t]]]
    return out


@njit(cache=True)
def detach_sentence(s, kc, tr, u, ka):
    """Retract the sentence's tokens and visits; prune emptied nodes."""
    d = kc.sent_doc[s]
    b = kc.doc_brand[d]
    path = ka.sent_path[s]
    for t in range(kc.sent_start[s], kc.sent_start[s + 1]):
        lv = ka.tok_level[t]
        if retract_token(u, path, lv, kc.words[t], ka.rec[t]) != 0:
            return ERR_WEIGHT
        ka.dbs[d] -= ka.beta[b, path[lv]]
    code = detach_path(tr, b, path)
    if code != OK:
        return code
    if prune_path(tr, u.W, u.N, u.Wsum, u.Ntot, u.A, path) < 0:
        return ERR_WEIGHT
    return OK


@njit(cache=True)
def attach_sentence(s, kc, tr, u, ka):
    """Inverse of ``detach_sentence`` for the path stored in ``sent_path[s]``."""
    d = kc.sent_doc[s]
    b = kc.doc_brand[d]
    path = ka.sent_path[s]
    first_new = path.shape[0]
    for l in range(path.shape[0]):
        if path[l] < 0:
            first_new = l
            break
    code = attach_path(tr, b, path)
    if code != OK:
        return code
    for l in range(first_new, path.shape[0]):
        ka.beta[:, path[l]] = 0.0
    for t in range(kc.sent_start[s], kc.sent_start[s + 1]):
        lv = ka.tok_level[t]
        apply_token(u, path, lv, kc.words[t], ka.rec[t])
        ka.dbs[d] += ka.beta[b, path[lv]]
    return OK


@njit(cache=True)
def path_scores(s, kc, tr, u, ka, hp, scores, cum_lp, cum_wl, cum_bt):
    """Unnormalized log posterior of every candidate path for a detached sentence.

    ``scores[i]`` belongs to the candidate ending at ``tr.order[i]``: an
    existing path if that node is a leaf, a fresh branch under it otherwise.
    Returns the number of candidates.
    """
    L = ka.sent_path.shape[1]
    d = kc.sent_doc[s]
    b = kc.doc_brand[d]
    t0 = kc.sent_start[s]
    n = kc.sent_start[s + 1] - t0
    V = u.W.shape[1]
    eta = hp.eta
    veta = V * eta

    # group tokens by level; same-term and same-level predecessors give the
    # sequential in-sentence increments of the block likelihood
    nl = np.zeros(L, np.int64)
    for i in range(n):
        nl[ka.tok_level[t0 + i]] += 1
    lstart = np.zeros(L + 1, np.int64)
    for l in range(L):
        lstart[l + 1] = lstart[l] + nl[l]
    fill = lstart[:L].copy()
    bylev = np.empty(n, np.int64)
    for i in range(n):
        lv = ka.tok_level[t0 + i]
        bylev[fill[lv]] = i
        fill[lv] += 1
    same = np.zeros(n)
    idx = np.zeros(n)
    for l in range(L):
        for a in range(lstart[l], lstart[l + 1]):
            i = bylev[a]
            idx[i] = a - lstart[l]
            c = 0
            for q in range(lstart[l], a):
                if kc.words[t0 + bylev[q]] == kc.words[t0 + i]:
                    c += 1
            same[i] = c

    newll = np.zeros(L + 1)
    for l in range(L - 1, -1, -1):
        acc = 0.0
        for a in range(lstart[l], lstart[l + 1]):
            i = bylev[a]
            acc += math.log(eta + same[i]) - math.log(veta + idx[i])
        newll[l] = newll[l + 1] + acc  # suffix sums: levels l..L-1

    y = kc.doc_y[d]
    nd = kc.doc_ntok[d]
    rest = ka.dbs[d]
    gamma = hp.gamma
    nal = tr.meta[N_ALIVE]
    for j in range(nal):
        k = tr.order[j]
        lv = tr.level[k]
        wl = 0.0
        ws = u.Wsum[k] + veta
        for a in range(lstart[lv], lstart[lv + 1]):
            i = bylev[a]
            v = kc.words[t0 + i]
            wl += math.log(u.W[k, v] + eta + same[i]) - math.log(ws + idx[i])
        bt = nl[lv] * ka.beta[b, k]
        if lv == 0:
            cum_lp[k] = 0.0
            cum_wl[k] = wl
            cum_bt[k] = bt
        else:
            p = tr.parent[k]
            cum_lp[k] = cum_lp[p] + child_log_factor(tr, b, k, gamma)
            cum_wl[k] = cum_wl[p] + wl
            cum_bt[k] = cum_bt[p] + bt
        resp = gauss_logpdf(y, (rest + cum_bt[k]) / nd, hp.rho2)
        if lv == L - 1:
            scores[j] = cum_lp[k] + cum_wl[k] + resp
        else:
            scores[j] = cum_lp[k] + new_child_log_factor(tr, b, k, gamma) + cum_wl[k] + newll[lv + 1] + resp
    return nal


@njit(cache=True)
def path_step(s, uval, kc, tr, u, ka, hp, scores, cum_lp, cum_wl, cum_bt):
    """Resample the path of sentence ``s`` given its token levels."""
    code = detach_sentence(s, kc, tr, u, ka)
    if code != OK:
        return code
    n = path_scores(s, kc, tr, u, ka, hp, scores, cum_lp, cum_wl, cum_bt)
    k = tr.order[_draw(scores, n, uval)]
    path = ka.sent_path[s]
    L = path.shape[0]
    lv = tr.level[k]
    path[lv] = k
    for l in range(lv - 1, -1, -1):
        path[l] = tr.parent[path[l + 1]]
    for l in range(lv + 1, L):
        path[l] = -1
    return attach_sentence(s, kc, tr, u, ka)


@njit(cache=True)
def path_sweep(start, uniforms, kc, tr, u, ka, hp):
    """Resample paths of sentences ``start..S-1``.

    Stops early with ERR_CAPACITY when fewer free slots remain than a new
    branch could need; returns ``(code, next_sentence)``.
    """
    S = ka.sent_path.shape[0]
    L = ka.sent_path.shape[1]
    C = tr.parent.shape[0]
    scores = np.empty(C)
    cum_lp = np.empty(C)
    cum_wl = np.empty(C)
    cum_bt = np.empty(C)
    for s in range(start, S):
        if tr.meta[N_FREE] < L - 1:
            return ERR_CAPACITY, s
        code = path_step(s, uniforms[s], kc, tr, u, ka, hp, scores, cum_lp, cum_wl, cum_bt)
        if code != OK:
            return code, s
    return OK, S


@njit(cache=True)
def level_logp(t, s, kc, u, ka, hp, nl, rest, out):
    """Log conditional of each level for a retracted token (``out`` is filled)."""
    L = ka.sent_path.shape[1]
    d = kc.sent_doc[s]
    b = kc.doc_brand[d]
    v = kc.words[t]
    V = u.W.shape[1]
    y = kc.doc_y[d]
    nd = kc.doc_ntok[d]
    for l in range(L):
        k = ka.sent_path[s, l]
        out[l] = (
            math.log(nl[l] + hp.alpha)
            + math.log(u.W[k, v] + hp.eta)
            - math.log(u.Wsum[k] + V * hp.eta)
            + gauss_logpdf(y, (rest + ka.beta[b, k]) / nd, hp.rho2)
        )


@njit(cache=True)
def level_step(t, s, uval, kc, u, ka, hp, nl, buf):
    """Resample the level of token ``t`` in sentence ``s``; ``nl`` holds the
    sentence's level counts including ``t`` and is updated in place."""
    d = kc.sent_doc[s]
    b = kc.doc_brand[d]
    path = ka.sent_path[s]
    lv = ka.tok_level[t]
    v = kc.words[t]
    if retract_token(u, path, lv, v, ka.rec[t]) != 0:
        return ERR_WEIGHT
    nl[lv] -= 1
    rest = ka.dbs[d] - ka.beta[b, path[lv]]
    L = path.shape[0]
    level_logp(t, s, kc, u, ka, hp, nl, rest, buf)
    new = _draw(buf, L, uval)
    ka.tok_level[t] = new
    nl[new] += 1
    apply_token(u, path, new, v, ka.rec[t])
    ka.dbs[d] = rest + ka.beta[b, path[new]]
    return OK


@njit(cache=True)
def level_sweep(uniforms, kc, u, ka, hp):
    S = ka.sent_path.shape[0]
    L = ka.sent_path.shape[1]
    nl = np.zeros(L, np.int64)
    buf = np.empty(L)
    for s in range(S):
        nl[:] = 0
        t0 = kc.sent_start[s]
        t1 = kc.sent_start[s + 1]
        for t in range(t0, t1):
            nl[ka.tok_level[t]] += 1
        for t in range(t0, t1):
            code = level_step(t, s, uniforms[t], kc, u, ka, hp, nl, buf)
            if code != OK:
                return code
    return OK


@njit(cache=True)
def initialize_chain(uniforms, kc, tr, u, ka):
    """Put every sentence on one root-to-leaf chain with uniform random levels."""
    S = ka.sent_path.shape[0]
    L = ka.sent_path.shape[1]
    chain = np.empty(L, np.int64)
    chain[0] = tr.order[0]
    for l in range(1, L):
        chain[l] = new_node(tr, chain[l - 1], l)
        if chain[l] < 0:
            return ERR_CAPACITY
    for t in range(ka.tok_level.shape[0]):
        ka.tok_level[t] = min(int(uniforms[t] * L), L - 1)
    for s in range(S):
        ka.sent_path[s, :] = chain
        code = attach_sentence(s, kc, tr, u, ka)
        if code != OK:
            return code
    return OK


@njit(cache=True)
def word_log_likelihood(tr, u, eta):
    """Leave-one-out log predictive of every assigned token at its node."""
    V = u.W.shape[1]
    veta = V * eta
    total = 0.0
    for j in range(tr.meta[N_ALIVE]):
        k = tr.order[j]
        if u.Ntot[k] == 0:
            continue
        for v in range(V):
            if u.N[k, v] > 0:
                total += u.N[k, v] * math.log(u.W[k, v] - 1.0 + eta)
        total -= u.Ntot[k] * math.log(u.Wsum[k] - 1.0 + veta)
    return total


@njit(cache=True)
def response_log_likelihood(kc, ka, rho2):
    total = 0.0
    for d in range(kc.doc_y.shape[0]):
        total += gauss_logpdf(kc.doc_y[d], ka.dbs[d] / kc.doc_ntok[d], rho2)
    return total
