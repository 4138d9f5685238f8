"""Adam with bias correction, state keyed by parameter name."""

from __future__ import annotations

import numpy as np


class AdamState:
    def __init__(self):
        self.step = 0
        self.m = {}
        self.v = {}


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """Update ``params`` (name -> Tensor) in place from ``grads`` (name -> array or None)."""
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data -= (lr * update).astype(p.data.dtype, copy=False)


class Adam:
    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self):
        grads = {n: p.grad for n, p in self.params.items()}
        adam_step(self.params, grads, self.state, self.lr, self.betas, self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
