"""AdamW with per-tensor step counts and a warm-up + cosine learning-rate schedule."""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def scaled_lr(base_lr: float, batch_size: int) -> float:
    return base_lr * batch_size / 256


def cosine_lr(peak: float, it: int, total: int, warmup: int, floor: float = 0.0) -> float:
    """Linear warm-up to ``peak`` over ``warmup`` iterations, then cosine decay to ``floor``."""
    if total <= 0:
        return peak
    if it < warmup:
        return peak * (it + 1) / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (it - warmup) / span)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled weight decay Adam.

    Tensors are registered lazily on their first update, so state only ever
    exists for tensors that actually received a step. Shared tensors updated
    from several stitches keep a single moment pair.
    """

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[int, dict] = {}

    def step(self, params, lr=None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        for p in params:
            if p.grad is None:
                continue
            st = self.state.get(id(p))
            if st is None:
                st = self.state[id(p)] = {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "ref": p}
            st["t"] += 1
            g = p.grad
            st["m"] = b1 * st["m"] + (1 - b1) * g
            st["v"] = b2 * st["v"] + (1 - b2) * g * g
            mhat = st["m"] / (1 - b1 ** st["t"])
            vhat = st["v"] / (1 - b2 ** st["t"])
            p.data *= 1 - lr * self.weight_decay
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)

    @staticmethod
    def zero_grad(params):
        for p in params:
            p.grad = None

    def tracked(self) -> list[Tensor]:
        return [st["ref"] for st in self.state.values()]
