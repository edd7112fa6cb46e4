"""First-order optimizers over dicts of numpy arrays (updated in place)."""

import numpy as np


class RMSprop:
    def __init__(self, lr=1e-4, rho=0.99, eps=1e-8):
        self.lr, self.rho, self.eps = lr, rho, eps
        self.sq = {}

    def step(self, params: dict, grads: dict):
        for name, g in grads.items():
            sq = self.sq.get(name)
            if sq is None:
                sq = self.sq[name] = np.zeros_like(g)
            sq *= self.rho
            sq += (1.0 - self.rho) * g * g
            params[name] -= self.lr * g / (np.sqrt(sq) + self.eps)


class Adam:
    def __init__(self, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr=0.1):
        self.lr = lr

    def step(self, params: dict, grads: dict):
        for name, g in grads.items():
            params[name] -= self.lr * g


def make(name: str, lr: float):
    try:
        cls = {"rmsprop": RMSprop, "adam": Adam, "sgd": SGD}[name]
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}") from None
    return cls(lr=lr)
