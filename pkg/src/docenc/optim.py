"""Training plumbing: AdamW updates and warmup + cosine schedules."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .errors import FrozenViolationError
from .numkernel import ParamStore, Tensor


class AdamW:
    """Decoupled weight-decay adaptive-moment optimizer, betas (0.9, 0.95)."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.betas = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    @classmethod
    def from_stores(cls, stores: Iterable[ParamStore], **kwargs) -> "AdamW":
        params: list[Tensor] = []
        for store in stores:
            if store.frozen:
                raise FrozenViolationError("cannot optimize a frozen ParamStore")
            params.extend(store.tensors())
        return cls(params, **kwargs)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else float(lr)
        b1, b2 = self.betas
        self._t += 1
        bc1 = 1.0 - b1 ** self._t
        bc2 = 1.0 - b2 ** self._t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(np.float32)


def lr_at_step(step: int, total_steps: int, base_lr: float,
               warmup_steps: int = 0, kind: str = "cosine") -> float:
    """Learning rate with linear warmup then cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if kind == "constant":
        return base_lr
    if total_steps <= warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    progress = min(max(progress, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
