"""Parameter containers and the small layer set shared by every model."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


def parameter(array) -> Tensor:
    return Tensor(array, requires_grad=True)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    """Base class: parameters are ``Tensor`` attributes with ``requires_grad``.

    Children are discovered from attributes holding modules or lists of modules,
    in attribute-assignment order, which fixes parameter naming.
    """

    training = False
    rng: np.random.Generator | None = None

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True, rng: np.random.Generator | None = None) -> "Module":
        """Toggle training mode; ``rng`` drives dropout while training."""
        for m in self.modules():
            m.training = mode
            m.rng = rng if mode else None
        return self

    def drop(self, x: Tensor, p: float) -> Tensor:
        if not self.training:
            return x
        return ops.dropout(x, p, self.rng)

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        """Cast all parameters in place (float64 is used for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_init(rng, (d_out, d_in), d_in)
        self.bias = uniform_init(rng, (d_out,), d_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-12):
        self.gamma = parameter(np.ones(d))
        self.beta = parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, num: int, d: int, rng: np.random.Generator):
        self.table = parameter(rng.normal(0.0, d**-0.5, size=(num, d)))

    def __call__(self, ids) -> Tensor:
        return ops.embedding(ids, self.table)


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"attention dim {d} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)

    def weights(self) -> tuple[Tensor, ...]:
        return (
            self.q.weight, self.q.bias, self.k.weight, self.k.bias,
            self.v.weight, self.v.bias, self.out.weight, self.out.bias,
        )

    def __call__(self, query: Tensor, key: Tensor, value: Tensor, mask=None) -> Tensor:
        return ops.multi_head_attention(query, key, value, self.weights(), self.heads, mask)


_ACTIVATIONS = {"relu": ops.relu, "gelu": ops.gelu, "swish": ops.swish}


def activation(name: str):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator, act: str = "swish", dropout: float = 0.0):
        self.w1 = Linear(d, hidden, rng)
        self.w2 = Linear(hidden, d, rng)
        self.act = act
        self.dropout = dropout

    def __call__(self, x: Tensor) -> Tensor:
        h = self.drop(activation(self.act)(self.w1(x)), self.dropout)
        return self.w2(h)
