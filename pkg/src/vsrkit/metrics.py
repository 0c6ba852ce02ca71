"""Character error rate with edit-operation counts, per utterance and per corpus."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EditOps:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0

    @property
    def distance(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    def __add__(self, other: "EditOps") -> "EditOps":
        return EditOps(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
        )


def normalize(text: str) -> str:
    """Characters compared for CER: all whitespace removed."""
    return "".join(text.split())


def edit_ops(ref, hyp) -> EditOps:
    """Minimal-distance alignment counts. Among equally short alignments the
    backtrace prefers match/substitution, then deletion, then insertion."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    s = dl = ins = 0
    i, j = n, m
    while i or j:
        if i and j and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i and d[i, j] == d[i - 1, j] + 1:
            dl += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditOps(int(s), dl, ins)


def cer(reference: str, hypothesis: str) -> tuple[EditOps, float]:
    """Edit counts and rate. An empty reference gives 0.0 for an empty
    hypothesis and +inf otherwise."""
    ref, hyp = normalize(reference), normalize(hypothesis)
    ops = edit_ops(ref, hyp)
    if not ref:
        return ops, 0.0 if not hyp else math.inf
    return ops, ops.distance / len(ref)


@dataclass
class UtteranceScore:
    utterance_id: str
    ops: EditOps
    ref_len: int
    rate: float
    missing: bool = False


@dataclass
class CorpusScore:
    rows: list[UtteranceScore]
    ops: EditOps
    ref_len: int

    @property
    def cer(self) -> float:
        if self.ref_len == 0:
            return 0.0 if self.ops.distance == 0 else math.inf
        return self.ops.distance / self.ref_len

    def report(self) -> str:
        lines = [_row(r.utterance_id, r.ops, r.ref_len, r.rate) for r in self.rows]
        lines.append(_row("#corpus", self.ops, self.ref_len, self.cer))
        return "".join(lines)


def _row(uid: str, ops: EditOps, ref_len: int, rate: float) -> str:
    return f"{uid}\t{ops.substitutions}\t{ops.deletions}\t{ops.insertions}\t{ref_len}\t{rate:.6f}\n"


def corpus_score(references: Mapping[str, str], hypotheses: Mapping[str, str]) -> CorpusScore:
    """Corpus CER = summed edits over summed reference lengths.

    A missing hypothesis counts as deleting the whole reference.
    """
    rows = []
    total = EditOps()
    ref_total = 0
    extra = sorted(set(hypotheses) - set(references))
    if extra:
        log.warning("ignoring %d hypotheses without a reference: %s", len(extra), ", ".join(extra[:5]))
    for uid in sorted(references):
        missing = uid not in hypotheses
        if missing:
            log.warning("no hypothesis for %s; counted as full deletion", uid)
        ops, rate = cer(references[uid], hypotheses.get(uid, ""))
        n = len(normalize(references[uid]))
        rows.append(UtteranceScore(uid, ops, n, rate, missing))
        total = total + ops
        ref_total += n
    return CorpusScore(rows, total, ref_total)


def read_hypotheses(path) -> dict[str, str]:
    """Parse a "utterance_id<TAB>text" file; the text may be empty."""
    from pathlib import Path

    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        uid, sep, text = line.partition("\t")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected utterance_id<TAB>text")
        if uid in out:
            raise ValueError(f"{path}:{lineno}: duplicate utterance id {uid!r}")
        out[uid] = text
    return out


def format_hypotheses(hyps: Mapping[str, str]) -> str:
    return "".join(f"{uid}\t{hyps[uid]}\n" for uid in sorted(hyps))
