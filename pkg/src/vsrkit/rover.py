"""ROVER system combination at character level.

Hypotheses are aligned one after another into a word transition network
(WTN): a sequence of slots, each holding one entry per system. Every slot is
then decided by vote.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .metrics import normalize

NULL = None


@dataclass(frozen=True)
class Entry:
    token: str | None
    system: int
    confidence: float = 1.0


@dataclass
class WordTransitionNetwork:
    slots: list[list[Entry]] = field(default_factory=list)
    num_systems: int = 0

    @classmethod
    def from_hypothesis(cls, tokens: Sequence[str], system: int = 0, confidence: float = 1.0) -> "WordTransitionNetwork":
        return cls([[Entry(t, system, confidence)] for t in tokens], 1)

    def __len__(self) -> int:
        return len(self.slots)

    def system_tokens(self, system: int) -> list[str]:
        """Recover one system's hypothesis from the network."""
        out = []
        for slot in self.slots:
            for e in slot:
                if e.system == system and e.token is not NULL:
                    out.append(e.token)
        return out


# backtrace moves, in preference order
_MATCH, _SUB, _DEL, _INS = range(4)


def align_into_wtn(
    wtn: WordTransitionNetwork, hypothesis: Sequence[str], system: int | None = None, confidence: float = 1.0
) -> tuple[WordTransitionNetwork, int]:
    """Align ``hypothesis`` against ``wtn`` and return the extended network and the alignment cost.

    Costs: a token already present in the slot matches at 0, any other token
    substitutes at 1; skipping a slot (the new system contributes NULL) costs 0
    if the slot already holds a NULL, else 1; inserting a new slot costs 1 and
    back-fills NULL for every earlier system.
    """
    system = wtn.num_systems if system is None else system
    slots = wtn.slots
    n, m = len(slots), len(hypothesis)
    tokens = [{e.token for e in s} for s in slots]
    del_cost = np.array([0 if NULL in t else 1 for t in tokens], dtype=np.int64)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[1:, 0] = np.cumsum(del_cost)
    d[0, 1:] = np.arange(1, m + 1)
    for j in range(1, n + 1):
        for i in range(1, m + 1):
            sub = d[j - 1, i - 1] + (hypothesis[i - 1] not in tokens[j - 1])
            d[j, i] = min(sub, d[j - 1, i] + del_cost[j - 1], d[j, i - 1] + 1)

    moves = []
    j, i = n, m
    while j or i:
        if j and i:
            miss = hypothesis[i - 1] not in tokens[j - 1]
            if d[j, i] == d[j - 1, i - 1] + miss:
                moves.append(_SUB if miss else _MATCH)
                j, i = j - 1, i - 1
                continue
        if j and d[j, i] == d[j - 1, i] + del_cost[j - 1]:
            moves.append(_DEL)
            j -= 1
        else:
            moves.append(_INS)
            i -= 1
    moves.reverse()

    prior = sorted({e.system for s in slots for e in s}) or list(range(wtn.num_systems))
    out: list[list[Entry]] = []
    j = i = 0
    for mv in moves:
        if mv in (_MATCH, _SUB):
            out.append(slots[j] + [Entry(hypothesis[i], system, confidence)])
            j, i = j + 1, i + 1
        elif mv == _DEL:
            out.append(slots[j] + [Entry(NULL, system, confidence)])
            j += 1
        else:
            out.append([Entry(NULL, s, confidence) for s in prior] + [Entry(hypothesis[i], system, confidence)])
            i += 1
    return WordTransitionNetwork(out, wtn.num_systems + 1), int(d[n, m])


def vote(slot: Sequence[Entry], num_systems: int, confidence_weight: float = 0.0, null_confidence: float = 0.0) -> str | None:
    """Winning token of one slot; ties prefer a real token, then the earliest system."""
    freq = Counter(e.token for e in slot)
    first = {}
    conf: dict = {}
    for e in slot:
        first.setdefault(e.token, e.system)
        c = null_confidence if e.token is NULL else e.confidence
        conf.setdefault(e.token, []).append(c)

    def score(tok):
        s = (1 - confidence_weight) * freq[tok] / num_systems
        if confidence_weight:
            s += confidence_weight * float(np.mean(conf[tok]))
        return s

    return max(freq, key=lambda t: (score(t), t is not NULL, -first[t]))


def combine_hypotheses(
    hypotheses: Sequence[str],
    confidences: Sequence[float] | None = None,
    confidence_weight: float = 0.0,
    null_confidence: float = 0.0,
) -> str:
    """Fuse one utterance's hypotheses (first one is the alignment base)."""
    if not hypotheses:
        raise ValueError("no hypotheses to combine")
    confidences = confidences or [1.0] * len(hypotheses)
    texts = [normalize(h) for h in hypotheses]
    wtn = WordTransitionNetwork.from_hypothesis(list(texts[0]), 0, confidences[0])
    for k in range(1, len(texts)):
        wtn, _ = align_into_wtn(wtn, list(texts[k]), k, confidences[k])
    winners = (vote(s, len(texts), confidence_weight, null_confidence) for s in wtn.slots)
    return "".join(t for t in winners if t is not NULL)


def rover_fuse(
    systems: Sequence[Mapping[str, str]],
    confidence_weight: float = 0.0,
    confidences: Sequence[Mapping[str, float]] | None = None,
    null_confidence: float = 0.0,
) -> dict[str, str]:
    """Fuse per-utterance hypotheses from several systems, ordered best first."""
    if len(systems) < 2:
        raise ValueError("ROVER needs at least 2 systems")
    ids = set(systems[0])
    for k, s in enumerate(systems[1:], 1):
        if set(s) != ids:
            diff = sorted(ids ^ set(s))
            raise ValueError(f"utterance ids differ between system 0 and system {k}: {', '.join(diff)}")
    out = {}
    for uid in sorted(ids):
        conf = [c[uid] for c in confidences] if confidences else None
        out[uid] = combine_hypotheses([s[uid] for s in systems], conf, confidence_weight, null_confidence)
    return out
