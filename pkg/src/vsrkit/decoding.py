"""Joint CTC/attention beam search with optional language-model shallow fusion.

Every expansion is scored as

    combined = (1 - ctc_weight) * att + ctc_weight * ctc + lm_weight * lm

where ``att`` and ``lm`` are accumulated token log-probabilities and ``ctc``
is the CTC prefix score of the hypothesis.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

NEG_INF = -np.inf


# ---------------------------------------------------------------- CTC prefix scoring


@dataclass(frozen=True)
class CTCPrefixState:
    """Per-frame log prefix probabilities ending in a non-blank (column 0) or a
    blank (column 1), plus the prefix score of the tokens consumed so far."""

    r: np.ndarray  # [T, 2]
    score: float
    length: int


class CTCPrefixScorer:
    """Prefix scorer over a fixed [T, V] matrix of CTC log-posteriors.

    ``score_batch`` is vectorized over hypotheses and candidate tokens. All
    prefixes in one call must hold the same number of tokens, which is the
    case in a synchronous beam search.
    """

    def __init__(self, log_probs: np.ndarray, blank: int, eos: int):
        lp = np.asarray(log_probs, dtype=np.float64)
        if lp.ndim != 2 or lp.shape[0] == 0:
            raise ValueError(f"CTC posteriors must be a non-empty [T,V] matrix, got shape {lp.shape}")
        self.x = lp
        self.blank = blank
        self.eos = eos

    @property
    def num_frames(self) -> int:
        return self.x.shape[0]

    def initial_state(self) -> CTCPrefixState:
        r = np.full((self.num_frames, 2), NEG_INF)
        r[:, 1] = np.cumsum(self.x[:, self.blank])
        return CTCPrefixState(r, 0.0, 0)

    def score_batch(
        self, prefixes: Sequence[Sequence[int]], states: Sequence[CTCPrefixState], cands: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Prefix scores [B, C] of every ``prefix + cand`` and the new r tensors [B, C, T, 2].

        ``prefixes`` start with sos; ``cands`` is [C] or [B, C]. The eos
        candidate gets the full-sequence probability of the prefix.
        """
        n_out = len(prefixes[0]) - 1
        for p, s in zip(prefixes, states):
            if len(p) - 1 != n_out or s.length != n_out:
                raise ValueError(f"CTC prefix state covers {s.length} tokens but prefix has {len(p) - 1}")
        b = len(prefixes)
        cands = np.asarray(cands, dtype=np.int64)
        if cands.ndim == 1:
            cands = np.broadcast_to(cands, (b, cands.size))
        t_len = self.num_frames
        xs = self.x[:, cands]  # [T, B, C]
        blank_lp = self.x[:, self.blank][:, None, None]
        rp = np.stack([s.r for s in states], axis=1)  # [T, B, 2]
        r = np.full((t_len, 2) + cands.shape, NEG_INF)
        if n_out == 0:
            r[0, 0] = xs[0]
        r_sum = np.logaddexp(rp[..., 0], rp[..., 1])  # [T, B]
        log_phi = np.repeat(r_sum[:, :, None], cands.shape[1], axis=2)
        if n_out > 0:
            last = np.array([p[-1] for p in prefixes])
            same = cands == last[:, None]
            # repeating the last token needs a blank in between
            log_phi = np.where(same[None], rp[..., 1][:, :, None], log_phi)
        start = max(n_out, 1)
        # a prefix cannot hold more tokens than there are frames
        log_psi = r[start - 1, 0].copy() if start <= t_len else np.full(cands.shape, NEG_INF)
        for t in range(start, t_len):
            r[t, 0] = np.logaddexp(r[t - 1, 0], log_phi[t - 1]) + xs[t]
            r[t, 1] = np.logaddexp(r[t - 1, 0], r[t - 1, 1]) + blank_lp[t]
            log_psi = np.logaddexp(log_psi, log_phi[t - 1] + xs[t])
        log_psi = np.where(cands == self.eos, r_sum[-1][:, None], log_psi)
        log_psi = np.where(cands == self.blank, NEG_INF, log_psi)
        return log_psi, np.moveaxis(r, (0, 1), (2, 3))

    def extend(self, prefix: Sequence[int], token: int, state: CTCPrefixState) -> tuple[float, CTCPrefixState]:
        psi, r = self.score_batch([prefix], [state], np.array([token]))
        score = float(psi[0, 0])
        delta = NEG_INF if state.score == NEG_INF else score - state.score
        return delta, CTCPrefixState(r[0, 0], score, state.length + 1)


def ctc_prefix_score_step(
    prefix: Sequence[int], next_token: int, state: CTCPrefixState | None, ctc_log_probs: np.ndarray,
    blank: int = 0, eos: int | None = None,
) -> tuple[float, CTCPrefixState]:
    """Incremental CTC prefix score of ``prefix + [next_token]``; ``state``
    must describe ``prefix`` (None builds the state for a bare sos prefix)."""
    eos = ctc_log_probs.shape[1] - 1 if eos is None else eos
    scorer = CTCPrefixScorer(ctc_log_probs, blank, eos)
    if state is None:
        if len(prefix) != 1:
            raise ValueError("a state is required for prefixes longer than sos")
        state = scorer.initial_state()
    return scorer.extend(prefix, next_token, state)


# ---------------------------------------------------------------- beam search


class LanguageModel(Protocol):
    def initial_state(self) -> Any: ...

    def score_batch(self, prefixes, states) -> tuple[np.ndarray, list]: ...


@dataclass
class DecodeParams:
    beam_size: int = 48
    ctc_weight: float = 0.5
    lm_weight: float = 0.4
    max_len_ratio: float = 1.0
    nbest: int = 1
    length_bonus: float = 0.0
    mode: str = "joint"  # or "rescore": attention(+LM) search, CTC applied to finished hypotheses

    def __post_init__(self):
        if self.beam_size < 1 or self.nbest < 1:
            raise ValueError("beam_size and nbest must be >= 1")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError("ctc_weight must be in [0, 1]")
        if self.lm_weight < 0:
            raise ValueError("lm_weight must be >= 0")
        if self.max_len_ratio <= 0:
            raise ValueError("max_len_ratio must be positive")
        if self.mode not in ("joint", "rescore"):
            raise ValueError(f"unknown decode mode {self.mode!r}")


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]  # sos-prefixed; ends with eos when finished
    att_score: float = 0.0
    ctc_score: float = 0.0
    lm_score: float = 0.0
    combined_score: float = 0.0
    ctc_state: CTCPrefixState | None = field(default=None, repr=False)
    lm_state: Any = field(default=None, repr=False)
    finished: bool = False
    forced: bool = False

    def content(self, eos: int) -> list[int]:
        toks = list(self.tokens[1:])
        return toks[:-1] if self.finished and toks and toks[-1] == eos else toks


def _rank_key(h: Hypothesis):
    return (-h.combined_score, h.tokens)


def beam_search_joint(
    ctc_log_probs: np.ndarray,
    att_scorer: Callable[[list[list[int]]], np.ndarray],
    params: DecodeParams,
    sos: int,
    eos: int,
    blank: int = 0,
    lm: LanguageModel | None = None,
) -> list[Hypothesis]:
    """One-pass joint beam search.

    ``ctc_log_probs`` is the [T, V] CTC log-posterior matrix, ``att_scorer``
    maps a batch of equal-length prefixes to next-token log-probs [B, V].
    Returns up to ``nbest`` finished hypotheses best first. If none finished
    with a finite score, the best live hypothesis is returned with ``forced``.
    """
    x = np.asarray(ctc_log_probs, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("empty encoder output")
    t_len, vocab = x.shape
    lam, beta = params.ctc_weight, params.lm_weight
    use_ctc = params.mode == "joint" and lam > 0
    use_lm = lm is not None and beta > 0
    scorer = CTCPrefixScorer(x, blank, eos)
    max_len = max(1, math.ceil(params.max_len_ratio * t_len))
    cands = np.array([v for v in range(vocab) if v != blank], dtype=np.int64)
    is_eos = cands == eos
    early_stop = params.length_bonus <= 0

    live = [Hypothesis((sos,), ctc_state=scorer.initial_state() if use_ctc else None,
                       lm_state=lm.initial_state() if use_lm else None)]
    finished: list[Hypothesis] = []
    last_live = live
    for i in range(max_len + 1):
        prefixes = [list(h.tokens) for h in live]
        att = np.asarray(att_scorer(prefixes), dtype=np.float64)[:, cands]
        if use_lm:
            lm_lp, lm_states = lm.score_batch(prefixes, [h.lm_state for h in live])
            lm_lp = np.asarray(lm_lp, dtype=np.float64)[:, cands]
        else:
            lm_lp, lm_states = np.zeros_like(att), [None] * len(live)
        if use_ctc:
            psi, r_new = scorer.score_batch(prefixes, [h.ctc_state for h in live], cands)
        else:
            psi, r_new = np.zeros_like(att), None
        att_tot = np.array([h.att_score for h in live])[:, None] + att
        lm_tot = np.array([h.lm_score for h in live])[:, None] + lm_lp
        n_tokens = np.where(is_eos, i, i + 1)[None, :]
        combined = (1 - lam) * att_tot + beta * lm_tot + params.length_bonus * n_tokens
        if use_ctc:
            combined = combined + lam * psi
        allowed = np.isfinite(combined)
        if i >= max_len:
            allowed &= is_eos[None, :]
        order = sorted(
            zip(*np.nonzero(allowed)),
            key=lambda bc: (-combined[bc], live[bc[0]].tokens + (int(cands[bc[1]]),)),
        )[: params.beam_size]
        new_live = []
        for b, c in order:
            tok = int(cands[c])
            h = Hypothesis(
                live[b].tokens + (tok,),
                float(att_tot[b, c]),
                float(psi[b, c]),
                float(lm_tot[b, c]),
                float(combined[b, c]),
                CTCPrefixState(r_new[b, c], float(psi[b, c]), i + 1) if use_ctc else None,
                lm_states[b],
                finished=tok == eos,
            )
            (finished if h.finished else new_live).append(h)
        last_live = live
        live = new_live
        if not live:
            break
        if early_stop and len(finished) >= params.nbest:
            ranked = sorted(finished, key=_rank_key)
            if live[0].combined_score <= ranked[params.nbest - 1].combined_score:
                break

    if params.mode == "rescore" and lam > 0:
        finished = [_rescore(h, scorer, lam, beta, params.length_bonus, eos) for h in finished]
    finished = [h for h in finished if np.isfinite(h.combined_score)]
    if not finished:
        pool = live or last_live
        best = min(pool, key=_rank_key)
        return [replace(best, forced=True)]
    return sorted(finished, key=_rank_key)[: params.nbest]


def _rescore(h: Hypothesis, scorer: CTCPrefixScorer, lam: float, beta: float, bonus: float, eos: int) -> Hypothesis:
    ctc = ctc_sequence_score(scorer.x, h.content(eos), scorer.blank)
    combined = (1 - lam) * h.att_score + lam * ctc + beta * h.lm_score + bonus * len(h.content(eos))
    return replace(h, ctc_score=ctc, combined_score=combined)


def ctc_sequence_score(log_probs: np.ndarray, labels: Sequence[int], blank: int = 0) -> float:
    """log p_ctc(labels | x) by the forward algorithm."""
    from .losses import ctc_forward_backward

    return ctc_forward_backward(np.asarray(log_probs, dtype=np.float64), list(labels), blank)[3]


# ---------------------------------------------------------------- model-level helpers


def decode_utterance(model, video, params: DecodeParams, lm=None) -> list[Hypothesis]:
    """Run the model's encoder and heads on one clip and beam-search it."""
    from .tensor import no_grad

    with no_grad():
        enc = model.encode(video)
        ctc_lp = model.ctc_log_probs(enc).f64()
    memory = enc.states
    vocab = model.vocab
    return beam_search_joint(
        ctc_lp,
        lambda prefixes: model.decoder.next_token_scores(prefixes, memory),
        params,
        sos=vocab.sos,
        eos=vocab.eos,
        blank=vocab.blank,
        lm=lm,
    )


def format_nbest(utterance_id: str, hyps: Sequence[Hypothesis], vocab) -> str:
    lines = []
    for rank, h in enumerate(hyps, 1):
        text = vocab.decode(h.content(vocab.eos))
        lines.append(
            f"{utterance_id}\t{rank}\t{h.combined_score:.6f}\t{h.att_score:.6f}\t"
            f"{h.ctc_score:.6f}\t{h.lm_score:.6f}\t{text}\n"
        )
    return "".join(lines)


@dataclass
class DecodeResult:
    utterance_id: str
    text: str
    hyps: list[Hypothesis]
    error: str | None = None


def _decode_entry(model, lm, manifest, entry, params: DecodeParams) -> DecodeResult:
    try:
        video = manifest.load_video(entry)
        hyps = decode_utterance(model, video, params, lm)
        return DecodeResult(entry.utterance_id, model.vocab.decode(hyps[0].content(model.vocab.eos)), hyps)
    except Exception as exc:  # noqa: BLE001 - one bad utterance must not abort the batch
        log.warning("decoding %s failed: %s", entry.utterance_id, exc)
        return DecodeResult(entry.utterance_id, "", [], str(exc))


_WORKER: dict = {}


def _worker_init(checkpoint: str, manifest_path: str, params: DecodeParams) -> None:
    from .model import load_checkpoint
    from .video import read_manifest

    model, lm = load_checkpoint(checkpoint)
    _WORKER.update(model=model, lm=lm, manifest=read_manifest(manifest_path), params=params)


def _worker_decode(index: int) -> DecodeResult:
    w = _WORKER
    return _decode_entry(w["model"], w["lm"], w["manifest"], w["manifest"].entries[index], w["params"])


def batch_decode(manifest_path, checkpoint, params: DecodeParams, workers: int = 1, use_lm: bool = True) -> list[DecodeResult]:
    """Decode every utterance of a manifest; results are sorted by utterance id."""
    from .model import load_checkpoint
    from .video import read_manifest

    manifest = read_manifest(manifest_path)
    order = sorted(range(len(manifest)), key=lambda i: manifest.entries[i].utterance_id)
    if not use_lm:
        params = replace(params, lm_weight=0.0)
    if workers > 1 and len(order) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers, initializer=_worker_init,
                                 initargs=(str(checkpoint), str(manifest_path), params)) as pool:
            return list(pool.map(_worker_decode, order))
    model, lm = load_checkpoint(checkpoint)
    return [_decode_entry(model, lm, manifest, manifest.entries[i], params) for i in order]
