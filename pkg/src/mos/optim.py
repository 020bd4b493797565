"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.01
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: OptimizerState,
    lr: float | None = None,
) -> None:
    """One in-place AdamW update of every entry in ``params``.

    A missing or ``None`` gradient counts as zero, so weight decay still applies.
    """
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p.data)
            state.exp_avg_sq[name] = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ValueError(f"moment buffer for {name} has shape {m.shape}, parameter has {p.shape}")
        v = state.exp_avg_sq[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data *= 1.0 - lr * state.weight_decay
        denom = np.sqrt(v) / math.sqrt(bc2) + state.eps
        p.data -= (lr / bc1) * m / denom


class AdamW:
    """Stateful wrapper that reads ``.grad`` from named trainable tensors."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-4,
        betas: Sequence[float] = (0.9, 0.95),
        weight_decay: float = 0.01,
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.state = OptimizerState(lr=lr, betas=(float(betas[0]), float(betas[1])),
                                    weight_decay=weight_decay, eps=eps)

    def step(self, lr: float | None = None) -> None:
        grads = {name: p.grad for name, p in self.params.items()}
        adamw_step(self.params, grads, self.state, lr=lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def lr_at(step: int, base_lr: float, warmup: int, total: int, min_lr: float) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to ``min_lr`` at ``total``."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    if total <= warmup:
        return base_lr
    progress = min(1.0, (step - warmup) / max(1, total - warmup))
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))
