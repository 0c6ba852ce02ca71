"""Differentiable operators used by the models.

Each operator computes in float64 via a plain-numpy core and records a
backward closure on the tape. No general broadcasting: elementwise binary ops
need equal shapes, and the only implicit expansion is a bias over leading axes.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, make_result

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce leading axes of ``g`` so it matches a trailing-aligned ``shape``."""
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_result(a.f64() + b.f64(), (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_result(a.f64() - b.f64(), (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    x, y = a.f64(), b.f64()
    return make_result(x * y, (a, b), lambda g: (g * y, g * x), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return make_result(a.f64() * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return make_result(a.f64() + c, (a,), lambda g: (g,), "add_scalar")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` where ``b`` matches the trailing axes of ``x``."""
    if x.shape[x.ndim - b.ndim :] != b.shape:
        raise ShapeError(f"add_bias: bias {b.shape} does not match trailing axes of {x.shape}")
    return make_result(x.f64() + b.f64(), (x, b), lambda g: (g, _sum_to(g, b.shape)), "add_bias")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return make_result(
        np.asarray(x.f64().sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum"
    )


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return make_result(
        np.asarray(x.f64().sum() / n), (x,), lambda g: (np.full(shape, float(g) / n),), "mean"
    )


def relu(x: Tensor) -> Tensor:
    v = x.f64()
    mask = v > 0
    return make_result(np.where(mask, v, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.f64())
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def swish(x: Tensor) -> Tensor:
    v = x.f64()
    s = _sigmoid(v)
    return make_result(v * s, (x,), lambda g: (g * (s + v * s * (1.0 - s)),), "swish")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.f64()
    inner = _SQRT_2_OVER_PI * (v + _GELU_C * v**3)
    t = np.tanh(inner)

    def backward(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return make_result(0.5 * v * (1.0 + t), (x,), backward, "gelu")


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half * sigmoid(second half)."""
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"glu: last axis {d} is odd")
    v = x.f64()
    a, b = v[..., : d // 2], v[..., d // 2 :]
    s = _sigmoid(b)

    def backward(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=-1),)

    return make_result(a * s, (x,), backward, "glu")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return make_result(x.f64() * keep, (x,), lambda g: (g * keep,), "dropout")


# -------------------------------------------------------------- shape / layout


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return make_result(x.f64().reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(
        np.ascontiguousarray(x.f64().transpose(axes)),
        (x,),
        lambda g: (g.transpose(inv),),
        "transpose",
    )


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    arrs = [t.f64() for t in xs]
    ax = axis % arrs[0].ndim
    sizes = np.cumsum([a.shape[ax] for a in arrs])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return make_result(np.concatenate(arrs, axis=ax), tuple(xs), backward, "concat")


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    ax = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=np.float64)
        out[idx] = g
        return (out,)

    return make_result(x.f64()[idx], (x,), backward, "slice")


def embedding(ids, table: Tensor) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"token id out of range [0, {v})")
    shape = table.shape

    def backward(g):
        out = np.zeros(shape, dtype=np.float64)
        np.add.at(out, ids, g)
        return (out,)

    return make_result(table.f64()[ids], (table,), backward, "embedding")


# ---------------------------------------------------------------- affine / norm


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` along the last axis of ``x``."""
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise ShapeError(f"linear: input last axis {x.shape[-1]} != weight D_in {d_in}")
    if bias is not None and bias.shape != (d_out,):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({d_out},)")
    v, w = x.f64(), weight.f64()
    out = v @ w.T
    if bias is not None:
        out = out + bias.f64()

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gw = g2.T @ v.reshape(-1, d_in)
        gx = g @ w
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "linear")


def _norm_backward(gy: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axes) -> np.ndarray:
    n = 1
    for a in axes:
        n *= xhat.shape[a]
    s1 = gy.sum(axis=axes, keepdims=True)
    s2 = (gy * xhat).sum(axis=axes, keepdims=True)
    return inv * (gy - s1 / n - xhat * s2 / n)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params must have shape ({d},)")
    v = x.f64()
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    ga = gamma.f64()

    def backward(g):
        gx = _norm_backward(g * ga, xhat, inv, (-1,))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(xhat * ga + beta.f64(), (x, gamma, beta), backward, "layer_norm")


def frame_instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel, per-frame normalization over (H, W) of a [C,T,H,W] tensor."""
    c = x.shape[0]
    if x.ndim != 4 or gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"frame_instance_norm: bad shapes {x.shape}, {gamma.shape}")
    v = x.f64()
    axes = (2, 3)
    mu = v.mean(axis=axes, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    ga = gamma.f64()[:, None, None, None]

    def backward(g):
        gx = _norm_backward(g * ga, xhat, inv, axes)
        return gx, (g * xhat).sum(axis=(1, 2, 3)), g.sum(axis=(1, 2, 3))

    return make_result(xhat * ga + beta.f64()[:, None, None, None], (x, gamma, beta), backward, "frame_instance_norm")


# ---------------------------------------------------------------- softmax family


def softmax_np(v: np.ndarray) -> np.ndarray:
    m = v.max(axis=-1, keepdims=True)
    e = np.exp(v - m)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_np(v: np.ndarray) -> np.ndarray:
    m = v.max(axis=-1, keepdims=True)
    z = v - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    s = softmax_np(x.f64())
    return make_result(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),), "softmax")


def log_softmax(x: Tensor) -> Tensor:
    y = log_softmax_np(x.f64())

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return make_result(y, (x,), backward, "log_softmax")


# ---------------------------------------------------------------- convolution


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3D cross-correlation of ``x`` [C_in,T,H,W] with ``kernel`` [C_out,C_in,kT,kH,kW]."""
    if x.ndim != 4:
        raise ShapeError(f"conv3d: input must be [C,T,H,W], got {x.shape}")
    if kernel.ndim != 5:
        raise ShapeError(f"conv3d: kernel must be [C_out,C_in,kT,kH,kW], got {kernel.shape}")
    stride, padding = _triple(stride), _triple(padding)
    if min(stride) < 1:
        raise ValueError(f"conv3d: stride must be >= 1, got {stride}")
    c_out, c_in, kt, kh, kw = kernel.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"conv3d: axis C_in mismatch, input has {x.shape[0]}, kernel expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({c_out},)")
    padded = [x.shape[i + 1] + 2 * padding[i] for i in range(3)]
    ksz = (kt, kh, kw)
    for name, p, k in zip("THW", padded, ksz):
        if k > p:
            raise ShapeError(f"conv3d: axis {name} kernel size {k} exceeds padded input size {p}")
    out_sz = [(p - k) // s + 1 for p, k, s in zip(padded, ksz, stride)]

    v = x.f64()
    pt, ph, pw = padding
    xp = np.pad(v, ((0, 0), (pt, pt), (ph, ph), (pw, pw))) if any(padding) else v
    w2 = kernel.f64().reshape(c_out, -1)
    st, sh, sw = stride
    to, ho, wo = out_sz
    # im2col: rows are (c_in, dt, dh, dw), columns are output positions
    win = np.lib.stride_tricks.sliding_window_view(xp, ksz, axis=(1, 2, 3))
    win = win[:, : st * (to - 1) + 1 : st, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]
    cols = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(c_in * kt * kh * kw, to * ho * wo)
    out = w2 @ cols
    if bias is not None:
        out += bias.f64()[:, None]
    out = out.reshape(c_out, to, ho, wo)

    def backward(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(kernel.shape)
        gb = g2.sum(axis=1) if bias is not None else None
        if not x.requires_grad:
            return (None, gw) if bias is None else (None, gw, gb)
        gcols = (w2.T @ g2).reshape(c_in, kt, kh, kw, to, ho, wo)
        gxp = np.zeros_like(xp)
        for dt in range(kt):
            for dh in range(kh):
                for dw in range(kw):
                    gxp[
                        :,
                        dt : dt + st * (to - 1) + 1 : st,
                        dh : dh + sh * (ho - 1) + 1 : sh,
                        dw : dw + sw * (wo - 1) + 1 : sw,
                    ] += gcols[:, dt, dh, dw]
        gx = gxp[:, pt : pt + v.shape[1], ph : ph + v.shape[2], pw : pw + v.shape[3]]
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, parents, backward, "conv3d")


def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded depthwise temporal convolution of ``x`` [...,T,C] with ``weight`` [C,K], K odd.

    Taps farther than T-1 frames from the center only ever see padding, so the
    kernel is trimmed to its central ``min(K, 2T-1)`` taps; the result is unchanged.
    """
    c, k = weight.shape
    if k % 2 == 0:
        raise ShapeError(f"depthwise_conv1d: kernel size {k} must be odd")
    if x.shape[-1] != c:
        raise ShapeError(f"depthwise_conv1d: channel axis {x.shape[-1]} != {c}")
    t = x.shape[-2]
    keff = min(k, 2 * t - 1)
    off = (k - keff) // 2
    half = keff // 2
    v = x.f64()
    w = weight.f64()
    pad = [(0, 0)] * (v.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(v, pad)
    out = np.zeros_like(v)
    for j in range(keff):
        out += xp[..., j : j + t, :] * w[:, off + j]
    if bias is not None:
        out += bias.f64()

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        lead = tuple(range(g.ndim - 1))
        for j in range(keff):
            gw[:, off + j] = (g * xp[..., j : j + t, :]).sum(axis=lead)
            gxp[..., j : j + t, :] += g * w[:, off + j]
        gx = gxp[..., half : half + t, :]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=lead)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "depthwise_conv1d")


# ---------------------------------------------------------------- pooling


def max_pool_hw(x: Tensor) -> Tensor:
    """2x2 / stride-2 max pooling over the last two axes of [C,T,H,W]; floor for odd sizes."""
    c, t, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise ShapeError(f"max_pool_hw: spatial size {h}x{w} pools to zero")
    v = x.f64()[:, :, : 2 * ho, : 2 * wo]
    blocks = v.reshape(c, t, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(c, t, ho, wo, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((c, t, ho, wo, 4), dtype=np.float64)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros((c, t, h, w), dtype=np.float64)
        gx[:, :, : 2 * ho, : 2 * wo] = (
            gb.reshape(c, t, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(c, t, 2 * ho, 2 * wo)
        )
        return (gx,)

    return make_result(out, (x,), backward, "max_pool_hw")


def avg_pool_hw(x: Tensor) -> Tensor:
    """Average over the spatial axes of [C,T,H,W], giving [C,T]."""
    c, t, h, w = x.shape
    n = h * w
    return make_result(
        x.f64().sum(axis=(2, 3)) / n,
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / n, (c, t, h, w)).copy(),),
        "avg_pool_hw",
    )


# ---------------------------------------------------------------- attention


def _split_heads(a: np.ndarray, heads: int) -> np.ndarray:
    *lead, t, d = a.shape
    return a.reshape(*lead, t, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(a: np.ndarray) -> np.ndarray:
    *lead, h, t, dk = a.shape
    return a.swapaxes(-2, -3).reshape(*lead, t, h * dk)


def attention_core(q_in, k_in, v_in, weights, heads: int, mask=None) -> dict:
    """Float64 multi-head attention forward; returns the output and intermediates."""
    wq, bq, wk, bk, wv, bv, wo, bo = weights
    d = wq.shape[0]
    if d % heads:
        raise ValueError(f"attention dim {d} is not divisible by {heads} heads")
    dk = d // heads
    scale_ = 1.0 / math.sqrt(dk)
    qh = _split_heads(q_in @ wq.T + bq, heads)
    kh = _split_heads(k_in @ wk.T + bk, heads)
    vh = _split_heads(v_in @ wv.T + bv, heads)
    scores = (qh @ kh.swapaxes(-1, -2)) * scale_
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        scores = np.where(mask, scores, -np.inf)
        dead = ~mask.any(axis=-1)
        if dead.any():
            scores = np.where(dead[..., None], 0.0, scores)
    probs = softmax_np(scores)
    if mask is not None:
        probs = np.where(mask, probs, 0.0)
    ctx = _merge_heads(probs @ vh)
    out = ctx @ wo.T + bo
    return {"qh": qh, "kh": kh, "vh": vh, "probs": probs, "ctx": ctx, "out": out, "scale": scale_}


def attention_weights(q: Tensor, k: Tensor, v: Tensor, params: Sequence[Tensor], heads: int, mask=None) -> np.ndarray:
    """Per-head attention probabilities [..., heads, Tq, Tk] (inspection only)."""
    w = [p.f64() for p in params]
    return attention_core(q.f64(), k.f64(), v.f64(), w, heads, mask)["probs"]


def multi_head_attention(
    q: Tensor, k: Tensor, v: Tensor, params: Sequence[Tensor], heads: int, mask=None
) -> Tensor:
    """Scaled dot-product attention over [...,T,D] inputs.

    ``params`` is (wq, bq, wk, bk, wv, bv, wo, bo); ``mask`` is a boolean
    [Tq, Tk] array where True means attending is allowed.
    """
    d = params[0].shape[0]
    if d % heads:
        raise ValueError(f"attention dim {d} is not divisible by {heads} heads")
    for name, t in (("query", q), ("key", k), ("value", v)):
        if t.shape[-1] != d:
            raise ShapeError(f"attention: {name} last axis {t.shape[-1]} != {d}")
    if k.shape != v.shape or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"attention: incompatible shapes q={q.shape} k={k.shape} v={v.shape}")
    qi, ki, vi = q.f64(), k.f64(), v.f64()
    w = [p.f64() for p in params]
    wq, _, wk, _, wv, _, wo, _ = w
    r = attention_core(qi, ki, vi, w, heads, mask)

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        g2 = g.reshape(-1, d)
        gwo = g2.T @ r["ctx"].reshape(-1, d)
        gbo = g2.sum(axis=0)
        gctx = _split_heads(g @ wo, heads)
        probs = r["probs"]
        gprobs = gctx @ r["vh"].swapaxes(-1, -2)
        gvh = probs.swapaxes(-1, -2) @ gctx
        gscores = probs * (gprobs - (gprobs * probs).sum(axis=-1, keepdims=True)) * r["scale"]
        gqh = gscores @ r["kh"]
        gkh = gscores.swapaxes(-1, -2) @ r["qh"]
        out = []
        for gh, inp, wmat in ((gqh, qi, wq), (gkh, ki, wk), (gvh, vi, wv)):
            gm = _merge_heads(gh)
            out.append((gm @ wmat, gm.reshape(-1, d).T @ inp.reshape(-1, d), gm.sum(axis=lead)))
        (gq, gwq, gbq), (gk, gwk, gbk), (gv, gwv, gbv) = out
        return gq, gk, gv, gwq, gbq, gwk, gbk, gwv, gbv, gwo, gbo

    return make_result(r["out"], (q, k, v, *params), backward, "multi_head_attention")


def causal_mask(t: int) -> np.ndarray:
    """Lower-triangular visibility including the diagonal."""
    return np.tril(np.ones((t, t), dtype=bool))


def positional_encoding(t: int, d: int, start: int = 0) -> np.ndarray:
    """Sinusoidal absolute encodings [t, d]: sin on even columns, cos on odd."""
    pos = np.arange(start, start + t, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)
    freq = np.exp(-math.log(10000.0) * i / d)
    pe = np.zeros((t, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq[: d // 2])
    return pe
