"""SGD-with-momentum and Adam optimizers plus the poly learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from memreg.errors import StateError
from memreg.tensor import Tensor


class Optimizer:
    kind = "base"

    def __init__(self, params: Sequence[Tensor], lr: float):
        if lr <= 0:
            raise ValueError(f"base learning rate must be positive, got {lr}")
        self.params = list(params)
        self.base_lr = float(lr)
        self.lr = float(lr)
        self.step_count = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def _check_grads(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                label = p.name or f"#{i}"
                raise StateError(f"parameter {label} has no gradient; run backward() first")

    def step(self, lr: float | None = None):
        self._check_grads()
        if lr is not None:
            self.lr = float(lr)
        self.step_count += 1
        self._update(self.lr)

    def _update(self, lr: float):
        raise NotImplementedError

    def state_dict(self) -> dict:
        """Flat ``name -> array`` mapping of the moment buffers and counters."""
        raise NotImplementedError

    def load_state_dict(self, state: dict):
        raise NotImplementedError


class SGD(Optimizer):
    """SGD with heavy-ball momentum: ``v = mu * v + g``; ``p -= lr * v``."""

    kind = "sgd_momentum"

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def _update(self, lr):
        for p, v in zip(self.params, self.velocity):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v *= self.momentum
                v += g
                g = v
            p.data -= (lr * g).astype(p.dtype, copy=False)

    def state_dict(self):
        state = {"step_count": np.array([self.step_count], dtype=np.int64)}
        for i, v in enumerate(self.velocity):
            state[f"velocity.{i}"] = v
        return state

    def load_state_dict(self, state):
        self.step_count = int(state["step_count"][0])
        for i, v in enumerate(self.velocity):
            v[...] = state[f"velocity.{i}"]


class Adam(Optimizer):
    """Adam with bias-corrected moments."""

    kind = "adam"

    def __init__(self, params, lr: float, betas=(0.9, 0.99), eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _update(self, lr):
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            step = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= step.astype(p.dtype, copy=False)

    def state_dict(self):
        state = {"step_count": np.array([self.step_count], dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"m.{i}"] = m
            state[f"v.{i}"] = v
        return state

    def load_state_dict(self, state):
        self.step_count = int(state["step_count"][0])
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            m[...] = state[f"m.{i}"]
            v[...] = state[f"v.{i}"]


@dataclass(frozen=True)
class PolySchedule:
    base_lr: float
    total_iters: int
    power: float = 0.9

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.total_iters < 1:
            raise ValueError(f"total_iters must be >= 1, got {self.total_iters}")

    def __call__(self, iteration: int) -> float:
        return poly_lr(self, iteration)


def poly_lr(sched: PolySchedule, iteration: int) -> float:
    """``base_lr * (1 - iteration / total_iters) ** power``."""
    if not 0 <= iteration <= sched.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {sched.total_iters}]")
    return sched.base_lr * (1.0 - iteration / sched.total_iters) ** sched.power
