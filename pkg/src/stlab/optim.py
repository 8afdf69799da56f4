from __future__ import annotations

import numpy as np

from .seqmodel import Params


def clip_by_global_norm(grads: Params, max_norm: float) -> tuple[Params, float]:
    norm = grads.norm()
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = Params(grads.config, *(t * scale for t in grads.tensors()))
    return grads, norm


class Adam:
    """Adaptive-moment update; ``step`` descends ``grads`` (negate them to ascend)."""

    def __init__(self, lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: Params, grads: Params) -> Params:
        if self.m is None:
            self.m = [np.zeros_like(t) for t in params.tensors()]
            self.v = [np.zeros_like(t) for t in params.tensors()]
        self.t += 1
        if self.lr == 0.0:
            return params
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = []
        for p, g, m, v in zip(params.tensors(), grads.tensors(), self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            out.append(p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return Params(params.config, *out)
