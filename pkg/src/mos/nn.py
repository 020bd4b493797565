"""Parameter containers and the standard transformer layers built on mos.tensor."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

FFN_RATIO = 4


class Module:
    """Walks attributes to find parameter tensors and sub-modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self.__dict__.items():
            if name.startswith("_"):
                continue
            full = prefix + name
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable(self, prefix: str = "") -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters(prefix) if p.requires_grad}

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def _param(data: np.ndarray, dtype=T.DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = False,
                 zero: bool = False, std: float | None = None):
        std = 1.0 / np.sqrt(d_in) if std is None else std
        w = np.zeros((d_in, d_out)) if zero else rng.normal(0.0, std, (d_in, d_out))
        self.weight = _param(w)
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class RMSNorm(Module):
    def __init__(self, dim: int):
        self.gain = _param(np.ones(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.rms_norm(x, self.gain)


class FeedForward(Module):
    def __init__(self, dim: int, rng: np.random.Generator, ratio: int = FFN_RATIO):
        self.up = Linear(dim, ratio * dim, rng)
        self.down = Linear(ratio * dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.silu(self.up(x)))


class Attention(Module):
    """Bidirectional multi-head self-attention with per-head QK RMS-norm."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, qk_norm: bool = True):
        if dim % heads:
            raise ValueError(f"hidden_dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.q_gain = _param(np.ones(dim // heads)) if qk_norm else None
        self.k_gain = _param(np.ones(dim // heads)) if qk_norm else None

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None, queries: slice | None = None) -> Tensor:
        """``queries`` restricts the output positions; keys and values always span all of ``x``."""
        xq = x if queries is None else x[:, queries]
        h = T.multi_head_attention(
            self.q(xq), self.k(x), self.v(x), self.heads,
            qk_norm=self.q_gain is not None, q_gain=self.q_gain, k_gain=self.k_gain,
            key_mask=key_mask,
        )
        return self.out(h)


class Block(Module):
    """Pre-norm transformer block: x + attn(norm(x)), then x + ffn(norm(x))."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.norm1 = RMSNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = RMSNorm(dim)
        self.ffn = FeedForward(dim, rng)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None, queries: slice | None = None) -> Tensor:
        """With ``queries`` only those positions are computed (and returned)."""
        h = self.attn(self.norm1(x), key_mask, queries)
        x = (x if queries is None else x[:, queries]) + h
        return x + self.ffn(self.norm2(x))
