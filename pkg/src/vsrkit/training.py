"""Adam with inverse-sqrt warmup, gradient clipping and the toy-scale trainers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .decoder import TransformerLM
from .losses import JointLossConfig, ce_loss
from .model import VSRModel
from .tensor import NonFiniteError, Tensor, grad


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass
class OptimizerConfig:
    peak_lr: float = 2e-3
    warmup_steps: int = 50
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip_norm: float = 5.0
    batch_size: int = 4

    def __post_init__(self):
        if self.peak_lr <= 0 or self.warmup_steps < 1 or self.batch_size < 1:
            raise ValueError("peak_lr, warmup_steps and batch_size must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


def inverse_sqrt_lr(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to ``peak`` at ``warmup`` steps, then decay as 1/sqrt(step)."""
    step = max(step, 1)
    return peak * min(step / warmup, math.sqrt(warmup / step))


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.
    Returns the norm before clipping."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm > max_norm > 0:
        for g in grads:
            g *= max_norm / norm
    return norm


class Adam:
    def __init__(self, params: Sequence[Tensor], cfg: OptimizerConfig):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> float:
        cfg = self.cfg
        self.t += 1
        lr = inverse_sqrt_lr(self.t, cfg.peak_lr, cfg.warmup_steps)
        c1 = 1 - cfg.beta1**self.t
        c2 = 1 - cfg.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
            p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)
        return lr


@dataclass
class Sample:
    utterance_id: str
    video: np.ndarray  # [C, T, H, W]
    token_ids: list[int]


@dataclass
class TrainLog:
    curve: list[tuple[int, float, float, float]] = field(default_factory=list)
    skipped: int = 0

    def format_curve(self) -> str:
        return "".join(f"{s}\t{ctc:.6f}\t{ce:.6f}\t{j:.6f}\n" for s, ctc, ce, j in self.curve)


def _batches(ids: list[int], batch_size: int, rng: np.random.Generator):
    """Endless stream of batches drawn from per-epoch shuffles."""
    while True:
        order = rng.permutation(ids)
        for i in range(0, len(order) - batch_size + 1, batch_size):
            yield order[i : i + batch_size]
        if len(order) < batch_size:
            yield order


def train_toy(
    model: VSRModel,
    samples: Sequence[Sample],
    opt_cfg: OptimizerConfig,
    steps: int,
    seed: int = 0,
    loss_cfg: JointLossConfig | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainLog:
    """Optimize the joint loss; each step averages per-sample gradients over a
    mini-batch, summed in utterance-id order so the result is deterministic.

    Samples whose CTC loss is infeasible are skipped for that step.
    """
    loss_cfg = loss_cfg or JointLossConfig()
    log = TrainLog()
    if steps <= 0:
        return log
    if not samples:
        raise ValueError("no training samples")
    params = model.parameters()
    opt = Adam(params, opt_cfg)
    rng = np.random.default_rng(seed)
    stream = _batches(list(range(len(samples))), opt_cfg.batch_size, rng)
    model.train(True, np.random.default_rng([seed, 1]))
    try:
        for step in range(1, steps + 1):
            batch = sorted((samples[i] for i in next(stream)), key=lambda s: s.utterance_id)
            total = [np.zeros(p.shape) for p in params]
            sums = np.zeros(3)
            used = 0
            for s in batch:
                try:
                    parts = model.loss(s.video, s.token_ids, loss_cfg)
                except NonFiniteError as exc:
                    raise DivergenceError(step) from exc
                if np.isposinf(parts.ctc.data) and loss_cfg.ctc_weight > 0:
                    log.skipped += 1
                    continue
                vals = np.array([float(parts.ctc.data), float(parts.ce.data), float(parts.joint.data)])
                if np.isnan(vals).any() or np.isinf(vals[2]):
                    raise DivergenceError(step)
                try:
                    grads = grad(parts.joint, params)
                except NonFiniteError as exc:
                    raise DivergenceError(step, "gradient") from exc
                for acc, g in zip(total, grads):
                    acc += g
                sums += vals
                used += 1
            if used == 0:
                continue
            for g in total:
                g /= used
            if not all(np.isfinite(g).all() for g in total):
                raise DivergenceError(step, "gradient")
            clip_by_global_norm(total, opt_cfg.clip_norm)
            opt.step(total)
            mean = sums / used
            log.curve.append((step, *map(float, mean)))
            if progress is not None:
                progress(step, float(mean[2]))
    finally:
        model.eval()
    return log


def train_lm(
    lm: TransformerLM,
    sequences: Sequence[list[int]],
    opt_cfg: OptimizerConfig,
    steps: int,
    seed: int = 0,
) -> list[float]:
    """Next-token training on ``sos + ids + eos`` sequences; returns per-step mean loss."""
    if steps <= 0:
        return []
    if not sequences:
        raise ValueError("no LM training sequences")
    sos = lm.config.vocab_size - 1
    params = lm.parameters()
    opt = Adam(params, opt_cfg)
    stream = _batches(list(range(len(sequences))), opt_cfg.batch_size, np.random.default_rng([seed, 2]))
    lm.train(True, np.random.default_rng([seed, 3]))
    curve = []
    try:
        for step in range(1, steps + 1):
            idx = sorted(next(stream))
            total = [np.zeros(p.shape) for p in params]
            acc = 0.0
            for i in idx:
                ids = list(sequences[i])
                loss = ce_loss(lm([sos] + ids), ids + [sos])
                if not np.isfinite(loss.data):
                    raise DivergenceError(step)
                for t, g in zip(total, grad(loss, params)):
                    t += g
                acc += float(loss.data)
            for g in total:
                g /= len(idx)
            clip_by_global_norm(total, opt_cfg.clip_norm)
            opt.step(total)
            curve.append(acc / len(idx))
    finally:
        lm.eval()
    return curve
