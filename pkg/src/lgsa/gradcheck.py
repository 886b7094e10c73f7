"""Central finite-difference checks for the reverse-mode engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Graph, Tensor, no_grad


def fd_step(x: float) -> float:
    return 1e-5 * (1.0 + abs(x))


@dataclass
class GradCheckResult:
    rel_error: float
    worst_input: int
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]

    def ok(self, tol: float = 1e-4) -> bool:
        return self.rel_error <= tol


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative difference; 0 when both are exactly zero."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    coords: Sequence[np.ndarray | None] | None = None,
) -> GradCheckResult:
    """Compare reverse-mode gradients of scalar ``fn(*inputs)`` with central differences.

    ``coords`` optionally restricts each input to a subset of flat indices; the
    remaining entries are not perturbed (used for large parameter sets).
    """
    for t in inputs:
        t.zero_grad()
    loss = fn(*inputs)
    Graph(loss).backward()
    analytic, numeric = [], []
    worst, worst_i = 0.0, -1
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size) if coords is None or coords[i] is None else np.asarray(coords[i])
        num = np.empty(idx.size)
        with no_grad():
            for j, k in enumerate(idx):
                orig = flat[k]
                h = fd_step(orig)
                flat[k] = orig + h
                up = fn(*inputs).item()
                flat[k] = orig - h
                down = fn(*inputs).item()
                flat[k] = orig
                num[j] = (up - down) / (2.0 * h)
        ana = t.grad.reshape(-1)[idx].copy()
        analytic.append(ana)
        numeric.append(num)
        err = relative_error(ana, num)
        if err > worst:
            worst, worst_i = err, i
    return GradCheckResult(worst, worst_i, analytic, numeric)
