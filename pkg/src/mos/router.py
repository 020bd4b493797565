"""Token-wise, timestep-conditioned routing from understanding layers to generation blocks.

For every context token the router emits an m x n logit matrix (source layer
i, target block j). Columns are softmax-normalised over i, each column keeps
its top-k sources (or k random ones with probability epsilon), and the kept
weights mix the hidden-state bank into one context sequence per block. The
kept weights are not renormalised, so discarded mass acts as a gate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig, RouterConfig
from .nn import Block, Linear, Module, RMSNorm, _param
from .tensor import Tensor
from .towers import patchify

TIME_FREQUENCIES = 64
TIME_DIM = 2 * TIME_FREQUENCIES
TIME_SCALE = 1000.0
MAX_PERIOD = 1e4
CSV_VERSION = 1


def timestep_embedding(t, dim: int = TIME_DIM, max_period: float = MAX_PERIOD) -> np.ndarray:
    """Sinusoidal features [sin | cos] of ``1000 * t`` at geometrically spaced frequencies."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    angles = TIME_SCALE * t[:, None] * freqs[None]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _check_timesteps(t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if not np.all(np.isfinite(t)) or np.any((t < 0) | (t > 1)):
        raise ValueError(f"timestep must lie in [0, 1], got {t}")
    return t


@dataclass
class RoutingPlan:
    """Routing decision for a batch.

    ``weights`` is the column-normalised W-bar of shape (B, L_c, m, n); ``mask``
    marks the selected (i, j) entries; ``indices`` lists them as (B, L_c, n, k),
    0-based; ``explored`` flags columns whose selection was random.
    """

    weights: Tensor
    mask: np.ndarray
    indices: np.ndarray
    explored: np.ndarray
    logits: Tensor | None = None

    @property
    def m(self) -> int:
        return self.weights.shape[-2]

    @property
    def n(self) -> int:
        return self.weights.shape[-1]

    @property
    def k(self) -> int:
        return self.indices.shape[-1]

    def gated(self) -> Tensor:
        """Selected weights in place, zeros elsewhere."""
        return self.weights * self.mask.astype(self.weights.dtype)


def normalize_columns(logits: Tensor) -> Tensor:
    """Softmax over the source-layer axis (second to last) of (..., m, n) logits."""
    return T.softmax(logits, axis=-2)


def select_topk_epsilon(scores, k: int, epsilon: float, rng: np.random.Generator):
    """Pick k of the m entries on the last axis, independently for every leading position.

    With probability ``epsilon`` a position picks k distinct uniform-random
    indices; otherwise it picks the k largest, ties going to the lower index.
    Returns ``(indices, explored)`` with shapes (..., k) and (...).
    """
    scores = np.asarray(scores)
    m = scores.shape[-1]
    if not 1 <= k <= m:
        raise ValueError(f"k={k} must lie in [1, m={m}]")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon={epsilon} must lie in [0, 1]")
    greedy = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    if epsilon == 0.0:
        return greedy, np.zeros(scores.shape[:-1], dtype=bool)
    explored = rng.random(scores.shape[:-1]) < epsilon
    if not explored.any():
        return greedy, explored
    random = np.argsort(rng.random(scores.shape), axis=-1)[..., :k]
    return np.where(explored[..., None], random, greedy), explored


def selection_mask(indices: np.ndarray, m: int) -> np.ndarray:
    """(..., n, k) indices -> (..., m, n) boolean selection mask."""
    onehot = np.zeros(indices.shape[:-1] + (m,), dtype=bool)
    np.put_along_axis(onehot, indices, True, axis=-1)
    return np.swapaxes(onehot, -1, -2)


def plan_from_weights(weights: Tensor, k: int, epsilon: float, rng: np.random.Generator,
                      logits: Tensor | None = None) -> RoutingPlan:
    columns = np.swapaxes(weights.data, -1, -2)  # (..., n, m)
    indices, explored = select_topk_epsilon(columns, k, epsilon, rng)
    return RoutingPlan(weights, selection_mask(indices, weights.shape[-2]), indices, explored, logits)


def aggregate_states(bank: Tensor, plan: RoutingPlan, projection: Linear) -> list[Tensor]:
    """Mix bank entries per token and block, then apply the shared projection.

    ``bank`` has shape (B, m, L_c, d_u). Returns n tensors of shape (B, L_c, d_g)
    where entry j is ``proj(sum over selected i of W-bar[i, j] * S_i)``.
    """
    b, m, lc, _ = bank.shape
    if plan.weights.shape[:3] != (b, lc, m):
        raise ValueError(f"bank {bank.shape} does not match plan weights {plan.weights.shape}")
    mix = plan.gated().swapaxes(-1, -2)  # (B, L_c, n, m)
    states = bank.transpose((0, 2, 1, 3))  # (B, L_c, m, d_u)
    routed = projection(T.matmul(mix, states))  # (B, L_c, n, d_g)
    return [routed[:, :, j] for j in range(plan.n)]


def column_entropy(plan: RoutingPlan, token_mask: np.ndarray | None = None) -> float:
    """Mean Shannon entropy (nats) of the selected, renormalised weights per column."""
    w = np.where(plan.mask, plan.weights.data.astype(np.float64), 0.0)
    w = w / np.maximum(w.sum(-2, keepdims=True), 1e-30)
    h = -(np.where(w > 0, w * np.log(np.where(w > 0, w, 1.0)), 0.0)).sum(-2)  # (B, L_c, n)
    if token_mask is not None:
        return float(h[token_mask].mean())
    return float(h.mean())


class Router(Module):
    """Small bidirectional transformer over [timestep | latent | context] tokens."""

    def __init__(self, cfg: RouterConfig, model_cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.hidden_dim
        self.cfg = cfg
        self.m, self.n = model_cfg.m, model_cfg.n
        d_g = model_cfg.gen.hidden_dim
        self.time_proj = Linear(TIME_DIM, d, rng, bias=True)
        self.latent_proj = Linear(d_g, d, rng)
        self.context_proj = Linear(d_g, d, rng)
        if cfg.separate_norms:
            self.time_norm, self.latent_norm, self.context_norm = RMSNorm(d), RMSNorm(d), RMSNorm(d)
        else:
            self.input_norm = RMSNorm(d)
        self.cls = _param(rng.normal(0.0, 0.5, (1, d))) if cfg.prediction_mode == "sample_wise" else None
        self.blocks = [Block(d, cfg.heads, rng) for _ in range(cfg.blocks)]
        self.final_norm = RMSNorm(d)
        self.head = Linear(d, self.m * self.n, rng, bias=True, zero=True)

    def _norm(self, group: str) -> RMSNorm:
        return getattr(self, f"{group}_norm") if self.cfg.separate_norms else self.input_norm

    def embed_inputs(self, model, t, z_t, context: Tensor) -> Tensor:
        """(B,) timesteps, (B, H, W, C) latents, (B, L_c, d_u) final-layer states -> (B, 1+L_z+L_c, d_r)."""
        t = _check_timesteps(t)
        context = context if isinstance(context, Tensor) else Tensor(context)
        b = context.shape[0]
        if t.size == 1 and b > 1:
            t = np.full(b, t[0])
        parts = []
        if self.cfg.use_timestep:
            emb = Tensor(timestep_embedding(t), dtype=context.dtype)
            parts.append(self._norm("time")(self.time_proj(emb)).reshape(b, 1, -1))
        if self.cfg.use_latent:
            # Folding the shared patch embedding into the router projection saves one wide matmul.
            pe = model.gen.patch_embed
            z = z_t if isinstance(z_t, Tensor) else Tensor(z_t, dtype=context.dtype)
            w = T.matmul(pe.weight, self.latent_proj.weight)
            bias = T.matmul(pe.bias.reshape(1, -1), self.latent_proj.weight)
            lat = T.matmul(patchify(z, model.gen.cfg.patch_size), w) + bias
            parts.append(self._norm("latent")(lat))
        # same fold for the shared projection (it has no bias)
        ctx_w = T.matmul(model.proj.weight, self.context_proj.weight)
        parts.append(self._norm("context")(T.matmul(context, ctx_w)))
        return T.concat(parts, axis=1) if len(parts) > 1 else parts[0]

    def predict_logits(self, x: Tensor, context_len: int, context_mask: np.ndarray | None = None) -> Tensor:
        """Router sequence -> (B, L_c, m, n) logits (or (B, 1, m, n) in sample_wise mode)."""
        b, length, d = x.shape
        mask = None
        if context_mask is not None:
            mask = np.ones((b, length), dtype=bool)
            mask[:, length - context_len:] = context_mask
        if self.cls is not None:
            x = T.concat([x, T.broadcast_to(self.cls, (b, 1, d))], axis=1)
            if mask is not None:
                mask = np.concatenate([mask, np.ones((b, 1), dtype=bool)], axis=1)
        # only the read-out positions are needed after the last block's attention
        wanted = slice(-1, None) if self.cls is not None else slice(length - context_len, length)
        for i, block in enumerate(self.blocks):
            x = block(x, mask, wanted if i == len(self.blocks) - 1 else None)
        out = x if self.blocks else x[:, wanted]
        logits = self.head(self.final_norm(out))
        return logits.reshape(b, out.shape[1], self.m, self.n)

    def logits(self, model, t, z_t, context: Tensor, context_mask: np.ndarray | None = None) -> Tensor:
        x = self.embed_inputs(model, t, z_t, context)
        w = self.predict_logits(x, context.shape[1], context_mask)
        if w.shape[1] != context.shape[1]:
            w = T.broadcast_to(w, (w.shape[0], context.shape[1], self.m, self.n))
        return w

    def route(self, model, t, z_t, bank: Tensor, context_mask: np.ndarray | None,
              epsilon: float, rng: np.random.Generator) -> RoutingPlan:
        """Full routing decision; ``bank`` is (B, m, L_c, d_u) and its last layer feeds the router."""
        w = self.logits(model, t, z_t, bank[:, -1], context_mask)
        return plan_from_weights(normalize_columns(w), self.cfg.k, epsilon, rng, logits=w)


def export_plan_csv(path: str | Path, records: Sequence[tuple[float, np.ndarray]]) -> int:
    """Write (timestep, token_index, source_layer, target_block, weight) rows, 1-based layers.

    ``records`` pairs a timestep with its (L_c, m, n) W-bar. Returns the row count.
    """
    rows = 0
    with open(path, "w", newline="") as fh:
        fh.write(f"# mos routing plan v{CSV_VERSION}\n")
        out = csv.writer(fh)
        out.writerow(["timestep", "token_index", "source_layer", "target_block", "weight"])
        for t, wbar in records:
            lc, m, n = wbar.shape
            for tok in range(lc):
                for i in range(m):
                    for j in range(n):
                        out.writerow([repr(float(t)), tok, i + 1, j + 1, repr(float(wbar[tok, i, j]))])
                        rows += 1
    return rows
