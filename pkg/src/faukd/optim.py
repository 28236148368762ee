"""Decoupled-weight-decay adaptive-moment optimizer.

Parameters are addressed by their traversal path so that training can
replace tensors functionally (tensors are immutable) while moment state
stays attached to the name. Per-name learning-rate scaling supports the
reduced rate on encoder/decoder parameters during fine-tuning.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .params import get_by_path, set_by_path
from .tensor import Tensor


class AdamW:
    def __init__(
        self,
        names: Sequence[str],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        weight_decay: float = 5e-4,
        eps: float = 1e-8,
        lr_scale: Callable[[str], float] | None = None,
    ):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.names = list(names)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.lr_scale = lr_scale or (lambda name: 1.0)
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, root, grads: Sequence[np.ndarray]) -> None:
        """Apply one update; grads align with the constructor's name order."""
        if len(grads) != len(self.names):
            raise ValueError("gradient count does not match parameter count")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, g in zip(self.names, grads):
            param: Tensor = get_by_path(root, name)
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(param.data)
                self.v[name] = np.zeros_like(param.data)
            v = self.v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name], self.v[name] = m, v
            lr = self.lr * self.lr_scale(name)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            new = param.data - lr * update - lr * self.weight_decay * param.data
            set_by_path(root, name, Tensor(new, requires_grad=True))

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment state for checkpointing, keyed by a reserved prefix."""
        out: dict[str, np.ndarray] = {"opt/step": np.array([self.step_count], dtype=np.float64)}
        for name in self.names:
            if name in self.m:
                out[f"opt/m/{name}"] = self.m[name]
                out[f"opt/v/{name}"] = self.v[name]
        return out
