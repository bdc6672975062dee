"""Small parameter containers built on :mod:`m3impute.tensor`."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, uniform_init


class MLP:
    """One hidden GELU layer followed by a linear output layer."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, hidden: int, name="mlp"):
        self.w1 = uniform_init(rng, (n_in, hidden), n_in, f"{name}.w1")
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True, name=f"{name}.b1")
        self.w2 = uniform_init(rng, (hidden, n_out), hidden, f"{name}.w2")
        self.b2 = Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.b2")

    @property
    def n_in(self) -> int:
        return self.w1.shape[0]

    @property
    def n_out(self) -> int:
        return self.w2.shape[1]

    def __call__(self, x) -> Tensor:
        return T.linear(T.gelu(T.linear(x, self.w1, self.b1)), self.w2, self.b2)

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


class Identity:
    """Stand-in for an MLP that returns its input; used to reduce the model by hand."""

    def __call__(self, x) -> Tensor:
        return T.as_tensor(x)

    def parameters(self) -> list[Tensor]:
        return []


def zeros_param(shape, name) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)
