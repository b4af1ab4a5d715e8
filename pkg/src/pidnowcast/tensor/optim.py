"""Adaptive-moment (Adam) parameter updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(params, grads, state: AdamState, lr: float = 1e-3,
                   betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` are matching lists of arrays; ``grads`` entries may
    be None (treated as zero). Returns the new parameter arrays and mutates
    ``state`` in place.
    """
    b1, b2 = betas
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        out.append((p - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype))
    return out, state


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, clip_norm=None):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad for p in self.params]
        if self.clip_norm is not None:
            total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads if g is not None))
            if total > self.clip_norm:
                scale = self.clip_norm / (total + 1e-12)
                grads = [None if g is None else g * scale for g in grads]
        new, _ = optimizer_step([p.data for p in self.params], grads, self.state,
                                self.lr, self.betas, self.eps)
        for p, arr in zip(self.params, new):
            p.data = arr
