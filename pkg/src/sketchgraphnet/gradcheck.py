"""Finite-difference certification of autodiff gradients.

Every primitive and composite block is checked here: the analytic
gradient from the tape is compared against central differences of a
random linear functional of the op output, in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

__all__ = ["GradCheckReport", "ToleranceExceeded", "grad_check"]


class ToleranceExceeded(AssertionError):
    """Analytic and numeric gradients disagree beyond the tolerance."""

    def __init__(self, input_index: int, coord: tuple[int, ...], rel_err: float, tol: float):
        super().__init__(
            f"gradient mismatch on input {input_index} at coordinate {coord}: "
            f"rel err {rel_err:.3e} > tol {tol:.1e}"
        )
        self.input_index = input_index
        self.coord = coord
        self.rel_err = rel_err


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_input: int
    worst_coord: tuple[int, ...]
    per_input: list[float] = field(default_factory=list)

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def _rel_err(a: float, f: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), 1.0)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tol: float = 1e-4,
    eps: float = 1e-5,
    seed: int = 0,
    raise_on_fail: bool = True,
) -> GradCheckReport:
    """Compare tape gradients of ``fn(*inputs)`` against central differences.

    All float inputs must be float64; the output is projected onto a
    seeded random direction so non-scalar ops reduce to one scalar. The
    numeric side never touches the tape, keeping the two routes
    independent.
    """
    inputs = list(inputs)
    for i, t in enumerate(inputs):
        if t.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 inputs, input {i} is {t.dtype}")

    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    direction = rng.standard_normal(out.shape)
    loss = (out * Tensor(direction, dtype=np.float64)).sum()
    for t in inputs:
        t.grad = None
    loss.backward()

    def eval_loss() -> float:
        with no_grad():
            return float((fn(*inputs).data * direction).sum())

    max_rel, worst_input, worst_coord = 0.0, -1, ()
    per_input: list[float] = []
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            per_input.append(0.0)
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst_here = 0.0
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = eval_loss()
            flat[j] = orig - eps
            f_minus = eval_loss()
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = _rel_err(float(analytic.reshape(-1)[j]), numeric)
            if rel > worst_here:
                worst_here = rel
            if rel > max_rel:
                max_rel = rel
                worst_input = i
                worst_coord = np.unravel_index(j, t.shape) if t.ndim else ()
        per_input.append(worst_here)

    report = GradCheckReport(max_rel, worst_input, tuple(int(c) for c in np.atleast_1d(worst_coord)), per_input)
    if raise_on_fail and not report.ok(tol):
        raise ToleranceExceeded(report.worst_input, report.worst_coord, report.max_rel_err, tol)
    return report
