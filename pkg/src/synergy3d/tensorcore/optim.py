from __future__ import annotations

import numpy as np


def sgd_step(params, grads, lr, momentum, velocity):
    """One heavy-ball update in place: v <- momentum v + g; p <- p - lr v."""
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v += g
        p -= lr * v


class SGD:
    def __init__(self, named_params, lr, momentum=0.9):
        named_params = list(named_params)
        seen = set()
        for name, p in named_params:
            if id(p) in seen:
                raise ValueError(f"parameter {name} registered twice")
            seen.add(id(p))
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = []
        for name, p in zip(self.names, self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {name}")
            grads.append(g)
        sgd_step([p.data for p in self.params], grads, self.lr, self.momentum, self.velocity)

    def state_dict(self):
        return {f"velocity.{n}": v for n, v in zip(self.names, self.velocity)}

    def load_state_dict(self, state):
        for i, n in enumerate(self.names):
            self.velocity[i][...] = state[f"velocity.{n}"]
