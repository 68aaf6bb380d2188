"""Parameter containers shared by the encoders, plus seeded random streams."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def stream(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for one named purpose under the run seed."""
    digest = hashlib.sha256(f"{purpose}:{seed}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def uniform_weight(rng: np.random.Generator, out_dim: int, in_dim: int) -> Tensor:
    bound = 1.0 / np.sqrt(in_dim)
    return Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)), requires_grad=True)


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


@dataclass
class Linear:
    """``y = x W^T + b`` with W stored as (out, in)."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng, in_dim: int, out_dim: int) -> Linear:
        bound = 1.0 / np.sqrt(in_dim)
        return cls(uniform_weight(rng, out_dim, in_dim),
                   Tensor(rng.uniform(-bound, bound, size=out_dim), requires_grad=True))

    @classmethod
    def zero(cls, in_dim: int, out_dim: int) -> Linear:
        return cls(zeros(out_dim, in_dim), zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        if x.value.ndim == 1:
            return ad.add(ad.matmul(self.weight, x), self.bias)
        return ad.add_row(ad.matmul(x, ad.transpose(self.weight)), self.bias)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class MLP:
    """Two-layer perceptron: linear -> relu -> linear."""

    first: Linear
    second: Linear

    @classmethod
    def init(cls, rng, in_dim: int, hidden: int, out_dim: int) -> MLP:
        return cls(Linear.init(rng, in_dim, hidden), Linear.init(rng, hidden, out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return self.second(ad.relu(self.first(x)))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {**self.first.named(f"{prefix}.0"), **self.second.named(f"{prefix}.1")}
