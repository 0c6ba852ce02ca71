"""Independent reference implementations used as test oracles.

Everything here is written the slow, obvious way (explicit loops, brute-force
enumeration) and shares no code with the package beyond plain numpy.
"""

from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np


def conv3d_loops(x, w, b, stride=(1, 1, 1), pad=(0, 0, 0)):
    """7-nested-loop cross-correlation; x [Ci,T,H,W], w [Co,Ci,kt,kh,kw]."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    ci, t, h, wd = x.shape
    co, _, kt, kh, kw = w.shape
    xp = np.zeros((ci, t + 2 * pad[0], h + 2 * pad[1], wd + 2 * pad[2]))
    xp[:, pad[0] : pad[0] + t, pad[1] : pad[1] + h, pad[2] : pad[2] + wd] = x
    to = (xp.shape[1] - kt) // stride[0] + 1
    ho = (xp.shape[2] - kh) // stride[1] + 1
    wo = (xp.shape[3] - kw) // stride[2] + 1
    out = np.zeros((co, to, ho, wo))
    for o in range(co):
        for a in range(to):
            for r in range(ho):
                for c in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for i in range(ci):
                        for dt in range(kt):
                            for dh in range(kh):
                                for dw in range(kw):
                                    acc += w[o, i, dt, dh, dw] * xp[i, a * stride[0] + dt, r * stride[1] + dh, c * stride[2] + dw]
                    out[o, a, r, c] = acc
    return out


def linear_loops(x, w, b):
    x = np.asarray(x, dtype=np.float64)
    rows = x.reshape(-1, x.shape[-1])
    out = np.zeros((rows.shape[0], w.shape[0]))
    for n in range(rows.shape[0]):
        for o in range(w.shape[0]):
            acc = 0.0 if b is None else float(b[o])
            for i in range(w.shape[1]):
                acc += float(w[o, i]) * rows[n, i]
            out[n, o] = acc
    return out.reshape(*x.shape[:-1], w.shape[0])


def attention_loops(q, k, v, wq, bq, wk, bk, wv, bv, wo, bo, heads, mask=None):
    """Per-head, per-position scalar attention for [T,D] inputs."""
    qp, kp, vp = linear_loops(q, wq, bq), linear_loops(k, wk, bk), linear_loops(v, wv, bv)
    tq, d = qp.shape
    tk = kp.shape[0]
    dk = d // heads
    ctx = np.zeros((tq, d))
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        for i in range(tq):
            scores = []
            for j in range(tk):
                if mask is not None and not mask[i][j]:
                    scores.append(-math.inf)
                else:
                    scores.append(sum(qp[i, sl][m] * kp[j, sl][m] for m in range(dk)) / math.sqrt(dk))
            top = max(scores)
            ex = [math.exp(s - top) if s > -math.inf else 0.0 for s in scores]
            z = sum(ex)
            for j in range(tk):
                ctx[i, sl] += ex[j] / z * vp[j, sl]
    return linear_loops(ctx, wo, bo)


def ctc_collapse(path, blank=0):
    out = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return tuple(out)


def ctc_brute_force(log_probs, labels, blank=0):
    """log sum over all V^T frame paths that collapse to ``labels``."""
    lp = np.asarray(log_probs, dtype=np.float64)
    t, v = lp.shape
    total = -math.inf
    target = tuple(labels)
    for path in itertools.product(range(v), repeat=t):
        if ctc_collapse(path, blank) == target:
            total = np.logaddexp(total, sum(lp[i, p] for i, p in enumerate(path)))
    return float(total)


def ctc_sequence_table(log_probs, blank=0):
    """Map every collapsed label sequence to its total log-probability."""
    lp = np.asarray(log_probs, dtype=np.float64)
    t, v = lp.shape
    table: dict = {}
    for path in itertools.product(range(v), repeat=t):
        y = ctc_collapse(path, blank)
        s = sum(lp[i, p] for i, p in enumerate(path))
        table[y] = np.logaddexp(table.get(y, -math.inf), s)
    return table


def edit_distance_recursive(a: str, b: str) -> int:
    """Levenshtein distance by memoized recursion on suffixes."""

    @lru_cache(maxsize=None)
    def go(i: int, j: int) -> int:
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        if a[i] == b[j]:
            return go(i + 1, j + 1)
        return 1 + min(go(i + 1, j + 1), go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def exhaustive_joint_search(ctc_lp, att_fn, tokens, sos, eos, max_len, ctc_weight, lm_fn=None, lm_weight=0.0, blank=0):
    """Score every sequence of ``tokens`` up to ``max_len`` plus eos and return
    (best score, best sequence) with ties going to the smaller sequence."""
    table = ctc_sequence_table(ctc_lp, blank)
    best = None
    for n in range(max_len + 1):
        for y in itertools.product(tokens, repeat=n):
            seq = (sos, *y, eos)
            att = sum(float(att_fn(list(seq[:i]))[seq[i]]) for i in range(1, len(seq)))
            lm = sum(float(lm_fn(list(seq[:i]))[seq[i]]) for i in range(1, len(seq))) if lm_fn else 0.0
            ctc = float(table.get(tuple(y), -math.inf))
            score = (1 - ctc_weight) * att + lm_weight * lm
            if ctc_weight > 0:
                score += ctc_weight * ctc
            if not np.isfinite(score):
                continue
            key = (-score, seq)
            if best is None or key < best:
                best = key
    return -best[0], best[1]


def log_softmax_rows(a):
    a = np.asarray(a, dtype=np.float64)
    m = a.max(axis=-1, keepdims=True)
    return a - m - np.log(np.exp(a - m).sum(axis=-1, keepdims=True))


class TableScorer:
    """Deterministic pseudo-random next-token log-probs keyed by the prefix."""

    def __init__(self, vocab: int, seed: int, sharpness: float = 2.0):
        self.vocab = vocab
        self.seed = seed
        self.sharpness = sharpness
        self.cache: dict = {}

    def row(self, prefix) -> np.ndarray:
        key = tuple(prefix)
        if key not in self.cache:
            rng = np.random.default_rng([self.seed, len(key), *key])
            self.cache[key] = log_softmax_rows(rng.normal(size=self.vocab) * self.sharpness)
        return self.cache[key]

    def __call__(self, prefixes):
        return np.stack([self.row(p) for p in prefixes])


class TableLM(TableScorer):
    """Same table idea behind the incremental LM interface."""

    def initial_state(self):
        return 0

    def score_batch(self, prefixes, states):
        return self(prefixes), [s + 1 for s in states]
