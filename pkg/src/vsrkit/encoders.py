"""Sequence encoders over frontend features.

All three variants share one block interface: a ``[T, d_model]`` tensor in,
the same shape out. Blocks use pre-norm residuals and end with their own
layer norm, so a zero-layer encoder is just the input projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, parameter, uniform_init
from .tensor import Tensor

VARIANTS = ("conformer", "branchformer", "e_branchformer")


@dataclass
class EncoderConfig:
    variant: str = "e_branchformer"
    layers: int = 12
    d_model: int = 256
    heads: int = 4
    ffn_dim: int = 1024
    cgmlp_expansion: int = 4
    kernel_size: int = 31
    dropout: float = 0.0
    input_dim: int = 256
    macaron_scale: float = 0.5
    positional_encoding: bool = True
    attention_only: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown encoder variant {self.variant!r}; expected one of {VARIANTS}")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if (self.cgmlp_expansion * self.d_model) % 2:
            raise ValueError("cgmlp_expansion * d_model must be even")


@dataclass
class EncoderOutput:
    states: Tensor
    lengths: list[int]


class DepthwiseConv(Module):
    def __init__(self, channels: int, kernel: int, rng: np.random.Generator, bias_init: float | None = None):
        self.weight = uniform_init(rng, (channels, kernel), kernel)
        if bias_init is None:
            self.bias = uniform_init(rng, (channels,), kernel)
        else:
            self.bias = parameter(np.full(channels, bias_init))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv1d(x, self.weight, self.bias)


class ConvolutionalGatingMLP(Module):
    """cgMLP: channel up-projection, GELU, convolutional spatial gating, down-projection."""

    def __init__(self, d: int, expansion: int, kernel: int, rng: np.random.Generator, dropout: float = 0.0):
        hidden = expansion * d
        if hidden % 2:
            raise ValueError(f"cgMLP hidden size {hidden} must be even to split into content/gate halves")
        self.half = hidden // 2
        self.up = Linear(d, hidden, rng)
        self.gate_norm = LayerNorm(self.half)
        self.gate_conv = DepthwiseConv(self.half, kernel, rng, bias_init=1.0)
        self.down = Linear(self.half, d, rng)
        self.dropout = dropout

    def __call__(self, x: Tensor) -> Tensor:
        h = ops.gelu(self.up(x))
        content = ops.slice_axis(h, 0, self.half)
        gate = self.gate_conv(self.gate_norm(ops.slice_axis(h, self.half, 2 * self.half)))
        return self.down(self.drop(ops.mul(content, gate), self.dropout))


class ConvModule(Module):
    """Conformer convolution module: pointwise + GLU, depthwise, norm, swish, pointwise."""

    def __init__(self, d: int, kernel: int, rng: np.random.Generator):
        self.pw1 = Linear(d, 2 * d, rng)
        self.depthwise = DepthwiseConv(d, kernel, rng)
        self.norm = LayerNorm(d)
        self.pw2 = Linear(d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = ops.glu(self.pw1(x))
        h = ops.swish(self.norm(self.depthwise(h)))
        return self.pw2(h)


class _Block(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.norm_mha = LayerNorm(cfg.d_model)
        self.mha = MultiHeadAttention(cfg.d_model, cfg.heads, rng)

    def attend(self, x: Tensor) -> Tensor:
        h = self.norm_mha(x)
        if self.cfg.positional_encoding:
            h = ops.add_bias(h, Tensor(ops.positional_encoding(h.shape[-2], h.shape[-1]), dtype=h.dtype))
        return self.drop(self.mha(h, h, h), self.cfg.dropout)

    def _macaron(self, ff: FeedForward, norm: LayerNorm, x: Tensor) -> Tensor:
        return x + ops.scale(self.drop(ff(norm(x)), self.cfg.dropout), self.cfg.macaron_scale)


class ConformerBlock(_Block):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        d = cfg.d_model
        self.norm_ff1 = LayerNorm(d)
        self.ff1 = FeedForward(d, cfg.ffn_dim, rng, "swish", cfg.dropout)
        if not cfg.attention_only:
            self.norm_conv = LayerNorm(d)
            self.conv = ConvModule(d, cfg.kernel_size, rng)
        self.norm_ff2 = LayerNorm(d)
        self.ff2 = FeedForward(d, cfg.ffn_dim, rng, "swish", cfg.dropout)
        self.norm_final = LayerNorm(d)

    def __call__(self, x: Tensor) -> Tensor:
        x = self._macaron(self.ff1, self.norm_ff1, x)
        x = x + self.attend(x)
        if not self.cfg.attention_only:
            x = x + self.drop(self.conv(self.norm_conv(x)), self.cfg.dropout)
        x = self._macaron(self.ff2, self.norm_ff2, x)
        return self.norm_final(x)


class BranchformerBlock(_Block):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        d = cfg.d_model
        if not cfg.attention_only:
            self.norm_mlp = LayerNorm(d)
            self.cgmlp = ConvolutionalGatingMLP(d, cfg.cgmlp_expansion, cfg.kernel_size, rng, cfg.dropout)
            self.merge = Linear(2 * d, d, rng)
        self.norm_final = LayerNorm(d)

    def __call__(self, x: Tensor) -> Tensor:
        att = self.attend(x)
        if self.cfg.attention_only:
            return self.norm_final(x + att)
        local = self.drop(self.cgmlp(self.norm_mlp(x)), self.cfg.dropout)
        merged = self.merge(ops.concat([att, local], axis=-1))
        return self.norm_final(x + self.drop(merged, self.cfg.dropout))


class EBranchformerBlock(_Block):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        d = cfg.d_model
        self.norm_ff1 = LayerNorm(d)
        self.ff1 = FeedForward(d, cfg.ffn_dim, rng, "swish", cfg.dropout)
        if not cfg.attention_only:
            self.norm_mlp = LayerNorm(d)
            self.cgmlp = ConvolutionalGatingMLP(d, cfg.cgmlp_expansion, cfg.kernel_size, rng, cfg.dropout)
            self.fusion_conv = DepthwiseConv(2 * d, cfg.kernel_size, rng)
            self.merge = Linear(2 * d, d, rng)
        self.norm_ff2 = LayerNorm(d)
        self.ff2 = FeedForward(d, cfg.ffn_dim, rng, "swish", cfg.dropout)
        self.norm_final = LayerNorm(d)

    def __call__(self, x: Tensor) -> Tensor:
        x = self._macaron(self.ff1, self.norm_ff1, x)
        att = self.attend(x)
        if self.cfg.attention_only:
            x = x + att
        else:
            local = self.drop(self.cgmlp(self.norm_mlp(x)), self.cfg.dropout)
            both = ops.concat([att, local], axis=-1)
            both = both + self.fusion_conv(both)
            x = x + self.drop(self.merge(both), self.cfg.dropout)
        x = self._macaron(self.ff2, self.norm_ff2, x)
        return self.norm_final(x)


_BLOCKS = {"conformer": ConformerBlock, "branchformer": BranchformerBlock, "e_branchformer": EBranchformerBlock}


class Encoder(Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self.input_proj = Linear(config.input_dim, config.d_model, rng)
        block = _BLOCKS[config.variant]
        self.blocks = [block(config, rng) for _ in range(config.layers)]

    def __call__(self, features: Tensor) -> EncoderOutput:
        if features.shape[-1] != self.config.input_dim:
            raise ValueError(
                f"encoder expects feature dim {self.config.input_dim}, got {features.shape[-1]}"
            )
        x = self.input_proj(features)
        for block in self.blocks:
            x = block(x)
        return EncoderOutput(x, [x.shape[-2]])
