"""Central finite-difference gradient oracle.

Independent of the tape: it only ever calls the forward function on perturbed
copies of the inputs.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from memreg.tensor import Tensor, no_grad

STEP = 1e-5
TOLERANCE = 1e-4


def numerical_grad(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], wrt: int, step: float = STEP) -> np.ndarray:
    """d fn(*inputs) / d inputs[wrt] by central differences; ``fn`` must return a scalar."""
    base = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    x = base[wrt]
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn(*[Tensor(b) for b in base]).item()
            flat[i] = orig - step
            lo = fn(*[Tensor(b) for b in base]).item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
    return grad


def analytic_grads(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray]) -> list:
    tensors = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    out.backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)`` (0 when both vanish)."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = STEP) -> float:
    """Largest relative error between tape and finite-difference gradients over all inputs."""
    analytic = analytic_grads(fn, inputs)
    worst = 0.0
    for i, g in enumerate(analytic):
        worst = max(worst, relative_error(g, numerical_grad(fn, inputs, i, step)))
    return worst
