"""CTC and label-smoothed cross-entropy losses as tape operators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .tensor import Tensor, make_result

NEG_INF = -np.inf


@dataclass
class JointLossConfig:
    ctc_weight: float = 0.3
    label_smoothing: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError("ctc_weight must be in [0, 1]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")


def _lse(*arrays: np.ndarray) -> np.ndarray:
    stacked = np.stack(arrays)
    m = stacked.max(axis=0)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.where(np.isfinite(m), safe + np.log(np.exp(stacked - safe).sum(axis=0)), NEG_INF)


def _shift(a: np.ndarray, k: int) -> np.ndarray:
    """Shift right by ``k`` (left for negative ``k``), filling with -inf."""
    out = np.full_like(a, NEG_INF)
    if k > 0:
        out[k:] = a[:-k] if k < len(a) else out[k:]
    elif k < 0:
        out[:k] = a[-k:] if -k < len(a) else out[:k]
    else:
        out[:] = a
    return out


def ctc_forward_backward(lp: np.ndarray, labels: Sequence[int], blank: int):
    """Log-space alpha/beta over the blank-interleaved label sequence.

    Both lattices include the emission at their own frame. Returns
    (alpha, beta, extended labels, log total probability).
    """
    t_len = lp.shape[0]
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    s_len = len(ext)
    # transition s-2 -> s is allowed only onto a non-blank that differs from l'[s-2]
    skip = np.zeros(s_len, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    emit = lp[:, ext]

    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        jump = np.where(skip, _shift(prev, 2), NEG_INF)
        alpha[t] = _lse(prev, _shift(prev, 1), jump) + emit[t]

    beta = np.full((t_len, s_len), NEG_INF)
    beta[-1, -1] = emit[-1, -1]
    if s_len > 1:
        beta[-1, -2] = emit[-1, -2]
    skip_from = np.zeros(s_len, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        jump = np.where(skip_from, _shift(nxt, -2), NEG_INF)
        beta[t] = _lse(nxt, _shift(nxt, -1), jump) + emit[t]

    tail = [alpha[-1, -1]] + ([alpha[-1, -2]] if s_len > 1 else [])
    log_total = float(_lse(*[np.asarray(v) for v in tail]))
    return alpha, beta, ext, log_total


def ctc_loss(log_probs: Tensor, labels: Sequence[int], blank: int = 0) -> Tensor:
    """Negative log of the summed probability of every CTC alignment of ``labels``.

    An infeasible pair (too few frames) yields an infinite loss with no tape
    entry, so callers can skip the sample.
    """
    if log_probs.ndim != 2:
        raise ValueError(f"ctc_loss expects [T,V] log-probabilities, got {log_probs.shape}")
    labels = [int(x) for x in labels]
    if blank in labels:
        raise ValueError("labels must not contain the blank id")
    v = log_probs.shape[1]
    if any(not 0 <= x < v for x in labels):
        raise IndexError("label id out of range")
    lp = log_probs.f64()
    alpha, beta, ext, log_total = ctc_forward_backward(lp, labels, blank)
    if not np.isfinite(log_total):
        return make_result(np.asarray(np.inf), (log_probs,), None, "ctc_loss", check_finite=False)

    def backward(g):
        occ = np.exp(alpha + beta - lp[:, ext] - log_total)
        gl = np.zeros_like(lp)
        for s, k in enumerate(ext):
            gl[:, k] -= occ[:, s]
        return (gl * float(g),)

    return make_result(np.asarray(-log_total), (log_probs,), backward, "ctc_loss")


def ce_loss(log_probs: Tensor, targets: Sequence[int], smoothing: float = 0.0) -> Tensor:
    """Label-smoothed cross-entropy averaged over positions.

    The target keeps 1 - smoothing of the mass; the rest is spread evenly over
    the other V - 1 classes.
    """
    if log_probs.ndim != 2:
        raise ValueError(f"ce_loss expects [L,V] log-probabilities, got {log_probs.shape}")
    length, v = log_probs.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (length,):
        raise ValueError(f"ce_loss: {len(targets)} targets for {length} positions")
    q = np.full((length, v), smoothing / (v - 1))
    q[np.arange(length), targets] = 1.0 - smoothing
    lp = log_probs.f64()
    loss = -(q * lp).sum() / length
    return make_result(np.asarray(loss), (log_probs,), lambda g: (-q * float(g) / length,), "ce_loss")


def combine(ctc: Tensor, ce: Tensor, ctc_weight: float) -> Tensor:
    """ctc_weight * CTC + (1 - ctc_weight) * CE, dropping a zero-weighted term entirely."""
    if ctc_weight == 0.0:
        return ce
    if ctc_weight == 1.0 or not np.isfinite(ctc.data):
        return ctc
    return ops.scale(ctc, ctc_weight) + ops.scale(ce, 1.0 - ctc_weight)
