"""Transformer attention decoder and decoder-only Transformer language model."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .nn import Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, parameter
from .tensor import Tensor, no_grad


@dataclass
class DecoderConfig:
    vocab_size: int
    layers: int = 6
    d_model: int = 256
    heads: int = 4
    ffn_dim: int = 2048
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if self.layers < 0 or self.vocab_size < 3:
            raise ValueError("invalid decoder config")


@dataclass
class LmConfig:
    vocab_size: int
    layers: int = 24
    d_model: int = 512
    heads: int = 8
    ffn_dim: int = 2048
    dropout: float = 0.0
    tie_embeddings: bool = True

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if self.layers < 0 or self.vocab_size < 3:
            raise ValueError("invalid LM config")


def _embed_positions(embed: Embedding, tokens: np.ndarray, d: int, start: int = 0) -> Tensor:
    x = ops.scale(embed(tokens), math.sqrt(d))
    pe = ops.positional_encoding(tokens.shape[-1], d, start)
    return ops.add_bias(x, Tensor(pe, dtype=x.dtype))


def _check_tokens(tokens, vocab_size: int) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim not in (1, 2) or ids.shape[-1] < 1:
        raise ValueError(f"token input must be [L] or [B,L] with L >= 1, got shape {ids.shape}")
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise IndexError(f"token id out of range [0, {vocab_size})")
    if not np.all(ids[..., 0] == vocab_size - 1):
        raise ValueError("token sequences must start with sos")
    return ids


def _tile(x: Tensor, batch: int) -> Tensor:
    row = ops.reshape(x, (1, *x.shape))
    return ops.concat([row] * batch, axis=0)


class DecoderLayer(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.dropout = cfg.dropout
        self.norm_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, cfg.heads, rng)
        self.norm_src = LayerNorm(d)
        self.src_attn = MultiHeadAttention(d, cfg.heads, rng)
        self.norm_ff = LayerNorm(d)
        self.ff = FeedForward(d, cfg.ffn_dim, rng, "relu", cfg.dropout)

    def __call__(self, x: Tensor, memory: Tensor, mask: np.ndarray) -> Tensor:
        h = self.norm_self(x)
        x = x + self.drop(self.self_attn(h, h, h, mask), self.dropout)
        h = self.norm_src(x)
        x = x + self.drop(self.src_attn(h, memory, memory), self.dropout)
        return x + self.drop(self.ff(self.norm_ff(x)), self.dropout)


class TransformerDecoder(Module):
    def __init__(self, config: DecoderConfig, rng: np.random.Generator):
        self.config = config
        self.embed = Embedding(config.vocab_size, config.d_model, rng)
        self.layers = [DecoderLayer(config, rng) for _ in range(config.layers)]
        self.norm_final = LayerNorm(config.d_model)
        self.out = Linear(config.d_model, config.vocab_size, rng)

    def __call__(self, tokens, memory: Tensor) -> Tensor:
        """Log-probabilities [..., L, V]; row t sees tokens <= t and every memory frame.

        ``tokens`` is [L] or a batch [B, L] of equal-length prefixes; ``memory``
        is the encoder output [T, d_model].
        """
        ids = _check_tokens(tokens, self.config.vocab_size)
        if ids.ndim == 2 and memory.ndim == 2:
            memory = _tile(memory, ids.shape[0])
        x = _embed_positions(self.embed, ids, self.config.d_model)
        mask = ops.causal_mask(ids.shape[-1])
        for layer in self.layers:
            x = layer(x, memory, mask)
        return ops.log_softmax(self.out(self.norm_final(x)))

    def next_token_scores(self, prefixes: Sequence[Sequence[int]], memory: Tensor) -> np.ndarray:
        """Next-token log-probabilities [B, V] for equal-length prefixes."""
        with no_grad():
            return self(np.asarray(prefixes), memory).f64()[:, -1, :]


class LMLayer(Module):
    def __init__(self, cfg: LmConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.dropout = cfg.dropout
        self.norm_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, cfg.heads, rng)
        self.norm_ff = LayerNorm(d)
        self.ff = FeedForward(d, cfg.ffn_dim, rng, "relu", cfg.dropout)

    def __call__(self, x: Tensor, keys: Tensor | None = None, mask=None) -> tuple[Tensor, Tensor]:
        """Returns the layer output and the normalized input rows used as keys/values."""
        h = self.norm_self(x)
        kv = h if keys is None else ops.concat([keys, h], axis=-2)
        x = x + self.drop(self.self_attn(h, kv, kv, mask), self.dropout)
        return x + self.drop(self.ff(self.norm_ff(x)), self.dropout), h


@dataclass(frozen=True)
class LMState:
    """Cached per-layer key/value source rows for the ``length`` tokens consumed so far."""

    length: int
    caches: tuple[np.ndarray, ...]


class TransformerLM(Module):
    def __init__(self, config: LmConfig, rng: np.random.Generator):
        self.config = config
        self.embed = Embedding(config.vocab_size, config.d_model, rng)
        self.layers = [LMLayer(config, rng) for _ in range(config.layers)]
        self.norm_final = LayerNorm(config.d_model)
        if config.tie_embeddings:
            self.out_bias = parameter(np.zeros(config.vocab_size))
        else:
            self.out = Linear(config.d_model, config.vocab_size, rng)

    def _logits(self, h: Tensor) -> Tensor:
        h = self.norm_final(h)
        if self.config.tie_embeddings:
            return ops.linear(h, self.embed.table, self.out_bias)
        return self.out(h)

    def __call__(self, tokens) -> Tensor:
        """Log-probabilities [..., L, V] of the token following each position."""
        ids = _check_tokens(tokens, self.config.vocab_size)
        x = _embed_positions(self.embed, ids, self.config.d_model)
        mask = ops.causal_mask(ids.shape[-1])
        for layer in self.layers:
            x, _ = layer(x, mask=mask)
        return ops.log_softmax(self._logits(x))

    def initial_state(self) -> LMState:
        d = self.config.d_model
        empty = np.zeros((0, d), dtype=self.embed.table.dtype)
        return LMState(0, tuple(empty for _ in self.layers))

    def score_batch(
        self, prefixes: Sequence[Sequence[int]], states: Sequence[LMState]
    ) -> tuple[np.ndarray, list[LMState]]:
        """Incremental next-token log-probs [B, V] for equal-length prefixes.

        Each state must cover all but the last token of its prefix.
        """
        ids = _check_tokens(prefixes, self.config.vocab_size)
        if ids.ndim != 2 or len(states) != ids.shape[0]:
            raise ValueError("need one state per prefix")
        length = ids.shape[1] - 1
        for s in states:
            if s.length != length:
                raise ValueError(f"LM state covers {s.length} tokens but prefix needs {length}")
        with no_grad():
            x = _embed_positions(self.embed, ids[:, -1:], self.config.d_model, start=length)
            new_caches = []
            for i, layer in enumerate(self.layers):
                keys = Tensor(np.stack([s.caches[i] for s in states]), dtype=x.dtype)
                x, h = layer(x, keys)
                new_caches.append(h.data)
            logp = ops.log_softmax(self._logits(x)).data[:, 0, :]
        new_states = [
            LMState(length + 1, tuple(np.concatenate([s.caches[i], new_caches[i][b]]) for i in range(len(self.layers))))
            for b, s in enumerate(states)
        ]
        return logp, new_states


def lm_score_step(lm: TransformerLM, prefix: Sequence[int], state: LMState | None = None) -> tuple[np.ndarray, LMState]:
    """Next-token log-probabilities after ``prefix`` using a cache covering ``prefix[:-1]``."""
    if state is None:
        state = lm.initial_state()
        for i in range(1, len(prefix)):
            _, state = lm_score_step(lm, prefix[:i], state)
    logp, (new_state,) = lm.score_batch([list(prefix)], [state])
    return logp[0], new_state
