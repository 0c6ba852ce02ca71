"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """||a - n|| / max(||a||, ||n||, floor).

    The floor keeps gradients that vanish identically (e.g. an attention key
    bias) from dividing roundoff by roundoff.
    """
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


@dataclass
class GradientComparison:
    relative_error: float
    analytic_norm: float
    numeric_norm: float

    def passes(self, rtol: float, zero_atol: float = 1e-6) -> bool:
        """Within ``rtol``, or a gradient that vanishes by construction
        (both sides below ``zero_atol``), e.g. a bias cancelled by a following norm."""
        if self.relative_error < rtol:
            return True
        return self.analytic_norm < 1e-10 and self.numeric_norm < zero_atol


def compare_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = 1e-3,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[GradientComparison]:
    """Compare tape gradients of the scalar ``fn()`` with central differences.

    Entries of each tensor are perturbed in place; with ``max_entries`` only a
    random subset of coordinates is probed.
    """
    loss = fn()
    analytic = grad(loss, tensors)
    rng = rng or np.random.default_rng(0)
    out = []
    for t, g in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn().data)
            flat[i] = orig - step
            down = float(fn().data)
            flat[i] = orig
            numeric[j] = (up - down) / (2 * step)
        a = g.reshape(-1)[idx]
        out.append(GradientComparison(relative_error(a, numeric), float(np.linalg.norm(a)), float(np.linalg.norm(numeric))))
    return out


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = 1e-3,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Relative error of the tape gradient per tensor (see ``compare_gradients``)."""
    return [c.relative_error for c in compare_gradients(fn, tensors, step, max_entries, rng)]
