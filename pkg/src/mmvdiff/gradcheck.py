"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradcheckResult:
    ok: bool
    max_rel_error: float
    max_abs_error: float

    def __bool__(self) -> bool:
        return self.ok


def _contract(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * Tensor(weights, dtype=out.dtype)).sum()


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-8,
    seed: int = 0,
) -> GradcheckResult:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` takes one tensor per input array and returns a tensor of any shape;
    it is reduced to a scalar with fixed random weights so every output
    element contributes. Inputs are promoted to float64.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    probe = fn(*[Tensor(a) for a in arrays])
    weights = np.random.default_rng(seed).standard_normal(probe.shape)

    with Tape() as tape:
        loss = _contract(fn(*leaves), weights)
    analytic = tape.gradient(loss, leaves)

    def scalar(values):
        return float(_contract(fn(*[Tensor(v) for v in values]), weights).item())

    max_rel = max_abs = 0.0
    ok = True
    for i, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for j in range(base.size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i].reshape(-1)[j] += h
            minus[i].reshape(-1)[j] -= h
            flat[j] = (scalar(plus) - scalar(minus)) / (2 * h)
        err = np.abs(analytic[i] - numeric)
        scale = np.maximum(np.abs(analytic[i]), np.abs(numeric))
        ok &= bool(np.all(err <= rtol * scale + atol))
        max_abs = max(max_abs, float(err.max(initial=0.0)))
        rel = err / np.maximum(scale, 1e-300)
        max_rel = max(max_rel, float(np.where(err > atol, rel, 0.0).max(initial=0.0)))
    return GradcheckResult(ok, max_rel, max_abs)
