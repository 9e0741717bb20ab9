"""Parameter storage and the transformer pieces shared by encoders and decoder."""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import Tensor


def param_rng(seed: int, name: str) -> np.random.Generator:
    # Keyed by name so adding or removing a sub-module leaves every other
    # parameter's initial value untouched.
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class Module:
    """Flat name -> Tensor parameter store with deterministic init."""

    def __init__(self, seed: int = 0, dtype=np.float32, prefix: str = ""):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.prefix = prefix
        self.params: dict[str, Tensor] = {}

    def _new(self, name: str, data: np.ndarray) -> Tensor:
        full = self.prefix + name
        t = Tensor(np.ascontiguousarray(data, dtype=self.dtype), requires_grad=True, name=full)
        self.params[full] = t
        return t

    def xavier(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self._new(name, param_rng(self.seed, self.prefix + name).uniform(-limit, limit, (fan_in, fan_out)))

    def normal(self, name: str, shape, std: float = 0.02) -> Tensor:
        return self._new(name, param_rng(self.seed, self.prefix + name).normal(0.0, std, shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self._new(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self._new(name, np.ones(shape))

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def to(self, dtype) -> "Module":
        self.dtype = np.dtype(dtype)
        for t in self.params.values():
            t.data = np.ascontiguousarray(t.data, dtype=self.dtype)
            t.grad = None
        return self


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = nx.matmul(x, w)
    return y if b is None else nx.add(y, b)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[B, L, H*d] -> [B, H, L, d]"""
    b, l, d = x.shape
    return nx.transpose(nx.reshape(x, (b, l, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[B, H, L, d] -> [B, L, H*d]"""
    b, h, l, d = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (b, l, h * d))


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None, weights_out: list | None = None) -> Tensor:
    """Projected q/k/v [B, L, H*d] -> attended values [B, Lq, H*d]."""
    res = nx.sdpa(split_heads(q, heads), split_heads(k, heads), split_heads(v, heads), mask=mask,
                  return_weights=weights_out is not None)
    if weights_out is not None:
        res, w = res
        weights_out.append(w)
    return merge_heads(res)


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return linear(nx.gelu(linear(x, w1, b1)), w2, b2)
