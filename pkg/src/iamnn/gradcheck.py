"""Central finite-difference gradient checking (use with 64-bit tensors).

ReLU, max-pool and the halting rule make the loss only piecewise smooth.  A
central difference whose stencil straddles a branch switch measures the jump,
not the derivative, so :func:`piecewise_numerical_grad` detects such stencils
and retries them with a smaller step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ops
from .tensor import Tensor, backward, no_grad


def numerical_grad(loss_fn: Callable[[], Tensor], t: Tensor, h: float = 1e-4) -> np.ndarray:
    """d loss / d t by central differences, perturbing ``t.data`` in place."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    g = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            g[i] = (up - down) / (2 * h)
    return grad


def _evaluate(loss_fn):
    with ops.record_branches() as log:
        value = loss_fn().item()
    return value, log


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class PiecewiseGrad:
    grad: np.ndarray
    shrunk: np.ndarray  # flat indices whose stencil crossed a branch at the nominal step
    unresolved: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def piecewise_numerical_grad(loss_fn: Callable[[], Tensor], t: Tensor, h: float = 1e-4,
                             shrink: tuple[float, ...] = (1e-1, 1e-2, 1e-3)) -> PiecewiseGrad:
    """Central differences at step ``h``, except where ``theta +- h`` changes a branch.

    Such coordinates are retried at ``h * s`` for each ``s`` in ``shrink``; any
    that still straddle a branch are reported as unresolved.
    """
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    g = grad.reshape(-1)
    shrunk, unresolved = [], []
    with no_grad():
        _, base = _evaluate(loss_fn)
        for i in range(flat.size):
            orig = flat[i]
            for k, step in enumerate((h, *(h * s for s in shrink))):
                flat[i] = orig + step
                up, up_log = _evaluate(loss_fn)
                flat[i] = orig - step
                down, down_log = _evaluate(loss_fn)
                flat[i] = orig
                g[i] = (up - down) / (2 * step)
                if _same_branches(up_log, base) and _same_branches(down_log, base):
                    break
            else:
                unresolved.append(i)
            if k:
                shrunk.append(i)
    return PiecewiseGrad(grad, np.array(shrunk, dtype=np.int64), np.array(unresolved, dtype=np.int64))


def analytic_grads(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor]) -> dict[str, np.ndarray]:
    for t in tensors.values():
        t.grad = None
    backward(loss_fn())
    return {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for k, t in tensors.items()}


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(num / den)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor], h: float = 1e-4
                    ) -> dict[str, float]:
    """Relative error between analytic and numerical gradient, per named tensor."""
    analytic = analytic_grads(loss_fn, tensors)
    return {k: relative_error(analytic[k], numerical_grad(loss_fn, t, h)) for k, t in tensors.items()}


@dataclass
class GradReport:
    errors: dict[str, float]
    shrunk: dict[str, int]  # coordinates per tensor that needed a smaller step
    unresolved: dict[str, int]
    coordinates: int

    @property
    def worst(self) -> tuple[str, float]:
        return max(self.errors.items(), key=lambda kv: kv[1])


def check_gradients_piecewise(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor], h: float = 1e-4,
                              floor: float = 1e-10) -> GradReport:
    analytic = analytic_grads(loss_fn, tensors)
    errors, shrunk, unresolved = {}, {}, {}
    for k, t in tensors.items():
        pg = piecewise_numerical_grad(loss_fn, t, h)
        errors[k] = relative_error(analytic[k], pg.grad, floor)
        shrunk[k] = len(pg.shrunk)
        unresolved[k] = len(pg.unresolved)
    return GradReport(errors, shrunk, unresolved, sum(t.data.size for t in tensors.values()))
