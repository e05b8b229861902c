"""Adam and the warmup-then-linear-decay learning-rate schedule.

Only parameters whose ``.grad`` is set are stepped, and each parameter keeps
its own bias-correction counter. A parameter untouched by a loss therefore
stays bitwise identical through the step, which several training contracts
rely on (and which makes "this loss moves only these weights" a checkable
property rather than a convention).
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor


class Adam:
    def __init__(self, named_params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if isinstance(named_params, dict):
            named_params = list(named_params.items())
        self.named_params = [(n, p) for n, p in named_params]
        names = [n for n, _ in self.named_params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = {n: np.zeros_like(p.data) for n, p in self.named_params}
        self._v = {n: np.zeros_like(p.data) for n, p in self.named_params}
        self._t = {n: 0 for n, _ in self.named_params}

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def step(self, lr: float | None = None) -> int:
        """Apply one update; returns how many parameters moved."""
        lr = self.lr if lr is None else lr
        moved = 0
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                continue
            t = self._t[name] + 1
            self._t[name] = t
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
            moved += 1
        return moved


def warmup_linear_schedule(peak_lr: float, total_steps: int,
                           warmup_fraction: float = 0.1):
    """lr(step): linear ramp over the first warmup_fraction of steps, then
    linear decay reaching 0 at total_steps. ``step`` counts from 0."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    warm = max(1, round(total_steps * warmup_fraction))

    def lr_at(step: int) -> float:
        if step < warm:
            return peak_lr * (step + 1) / warm
        if step >= total_steps:
            return 0.0
        return peak_lr * (total_steps - step) / (total_steps - warm)

    return lr_at


def clone_params(named_params) -> dict:
    """Detached numpy copies, for before/after bitwise comparisons."""
    return {n: p.data.copy() for n, p in named_params}


def params_bitwise_equal(named_params, snapshot: dict) -> bool:
    return all(np.array_equal(p.data, snapshot[n]) for n, p in named_params)
