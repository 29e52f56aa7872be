"""Small numpy building blocks shared by the learned components."""

from __future__ import annotations

import numpy as np
from scipy.special import expit


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def logsigmoid(z):
    return -np.logaddexp(0.0, -z)


def dlogsigmoid(z):
    return expit(-z)


def mlp_forward(x, w1, b1, w2, b2):
    """Per-cell MLP with one ReLU hidden layer.  ``x`` is (S, D); returns (S, out)."""
    pre = x @ w1.T + b1
    act = np.maximum(pre, 0.0)
    return act @ w2.T + b2, (pre, act)


def mlp_backward(x, w2, cache, dout):
    """Gradients (dw1, db1, dw2, db2) for upstream ``dout`` of shape (S, out)."""
    pre, act = cache
    dw2 = dout.T @ act
    db2 = dout.sum(axis=0)
    dpre = (dout @ w2) * (pre > 0)
    dw1 = dpre.T @ x
    db1 = dpre.sum(axis=0)
    return dw1, db1, dw2, db2


class ParamLayout:
    """Named blocks laid out in a fixed order inside one flat vector."""

    def __init__(self, blocks):
        self.blocks = [(name, tuple(shape)) for name, shape in blocks]
        self.offsets = {}
        off = 0
        for name, shape in self.blocks:
            size = int(np.prod(shape)) if shape else 1
            self.offsets[name] = (off, off + size, shape)
            off += size
        self.size = off

    @property
    def names(self):
        return [n for n, _ in self.blocks]

    def view(self, theta, name):
        lo, hi, shape = self.offsets[name]
        return theta[lo:hi].reshape(shape)

    def views(self, theta):
        return {n: self.view(theta, n) for n in self.names}

    def slice(self, name) -> slice:
        lo, hi, _ = self.offsets[name]
        return slice(lo, hi)
