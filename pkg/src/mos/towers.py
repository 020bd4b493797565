"""The frozen understanding tower and the trainable generation tower.

The two stacks share nothing but routed hidden states: the understanding
tower exposes every block output, and each generation block reads one routed
context sequence as in-context tokens next to its visual tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig, TowerConfig
from .nn import Attention, Block, FeedForward, Linear, Module, RMSNorm, _param
from .tensor import Tensor

MAX_CONTEXT = 512


@dataclass(frozen=True)
class HiddenStateBank:
    """Per-layer outputs of the understanding tower for one context."""

    states: np.ndarray  # (m, L_c, d_u)

    @property
    def depth(self) -> int:
        return self.states.shape[0]

    @property
    def length(self) -> int:
        return self.states.shape[1]

    @property
    def width(self) -> int:
        return self.states.shape[2]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


# -- patch layout ------------------------------------------------------------------
def patchify(latent, p: int):
    """(..., H, W, C) -> (..., H/p * W/p, p*p*C), patches row-major, each flattened (dy, dx, c)."""
    *lead, h, w, c = latent.shape
    if h % p or w % p:
        raise ValueError(f"latent {h}x{w} not divisible by patch size {p}")
    shape = (*lead, h // p, p, w // p, p, c)
    nl = len(lead)
    axes = (*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    out_shape = (*lead, (h // p) * (w // p), p * p * c)
    if isinstance(latent, Tensor):
        return latent.reshape(shape).transpose(axes).reshape(out_shape)
    return np.asarray(latent).reshape(shape).transpose(axes).reshape(out_shape)


def unpatchify(tokens, h: int, w: int, p: int):
    """Exact inverse of :func:`patchify` for an (h, w) latent."""
    *lead, n, d = tokens.shape
    c = d // (p * p)
    if n != (h // p) * (w // p) or d != p * p * c:
        raise ValueError(f"cannot unpatchify {tokens.shape} into {h}x{w} with patch {p}")
    nl = len(lead)
    shape = (*lead, h // p, w // p, p, p, c)
    axes = (*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    out_shape = (*lead, h, w, c)
    if isinstance(tokens, Tensor):
        return tokens.reshape(shape).transpose(axes).reshape(out_shape)
    return np.asarray(tokens).reshape(shape).transpose(axes).reshape(out_shape)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    freqs = np.exp(-np.log(10_000.0) * np.arange(dim // 2) / (dim // 2))
    angles = pos * freqs[None]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


# -- understanding tower ----------------------------------------------------------------
class UnderstandingTower(Module):
    """Bidirectional encoder over caption tokens (and, for editing, reference-image patches).

    Randomly initialised and frozen at construction; it never joins the tape.
    """

    def __init__(self, cfg: TowerConfig, latent_channels: int, rng: np.random.Generator):
        d = cfg.hidden_dim
        self.cfg = cfg
        self.token_embed = _param(rng.normal(0.0, 1.0, (cfg.vocab_size, d)))
        self.image_embed = Linear(cfg.patch_size**2 * latent_channels, d, rng, bias=True)
        self.blocks = [Block(d, cfg.heads, rng) for _ in range(cfg.depth)]
        self._positions = sinusoidal_positions(MAX_CONTEXT, d).astype(np.float32)
        self.freeze()

    def embed(self, token_ids: Sequence[int], image_latent: np.ndarray | None = None) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        parts = [T.embedding(self.token_embed, ids)] if ids.size else []
        if image_latent is not None:
            parts.append(self.image_embed(Tensor(patchify(image_latent, self.cfg.patch_size),
                                                 dtype=self.token_embed.dtype)))
        if not parts:
            raise ValueError("context must contain at least one token")
        x = T.concat(parts, axis=0) if len(parts) > 1 else parts[0]
        if x.shape[0] > MAX_CONTEXT:
            raise ValueError(f"context length {x.shape[0]} exceeds {MAX_CONTEXT}")
        return x + self._positions[: x.shape[0]].astype(x.dtype)

    def __call__(self, token_ids: Sequence[int], image_latent: np.ndarray | None = None) -> HiddenStateBank:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise IndexError(f"token id outside vocabulary of size {self.cfg.vocab_size}")
        with T.no_grad():
            x = self.embed(ids, image_latent)
            states = []
            for block in self.blocks:
                x = block(x)
                states.append(x.data)
        return HiddenStateBank(np.stack(states))


# -- generation tower ------------------------------------------------------------------
class GenerationBlock(Module):
    """Joint attention over [context | visual] tokens; only the visual slice is kept.

    Context and visual tokens each get their own pre-norm. Queries are taken
    from visual tokens only, which is exactly the visual slice of full joint
    self-attention; the feed-forward likewise runs on the visual slice.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.ctx_norm = RMSNorm(dim)
        self.vis_norm = RMSNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.ffn_norm = RMSNorm(dim)
        self.ffn = FeedForward(dim, rng)

    def __call__(self, visual: Tensor, context: Tensor, context_mask: np.ndarray | None = None) -> Tensor:
        if visual.shape[-1] != context.shape[-1]:
            raise ValueError(f"context width {context.shape[-1]} != visual width {visual.shape[-1]}")
        vis = self.vis_norm(visual)
        joint = T.concat([self.ctx_norm(context), vis], axis=-2)
        key_mask = None
        if context_mask is not None:
            ones = np.ones(context_mask.shape[:-1] + (visual.shape[-2],), dtype=bool)
            key_mask = np.concatenate([context_mask, ones], axis=-1)
        a = self.attn
        h = T.multi_head_attention(a.q(vis), a.k(joint), a.v(joint), a.heads, qk_norm=True,
                                   q_gain=a.q_gain, k_gain=a.k_gain, key_mask=key_mask)
        x = visual + a.out(h)
        return x + self.ffn(self.ffn_norm(x))


class GenerationTower(Module):
    """Patch transformer predicting flow velocity; it receives no timestep embedding."""

    def __init__(self, cfg: TowerConfig, latent_shape: tuple[int, int, int], rng: np.random.Generator):
        h, w, c = latent_shape
        p = cfg.patch_size
        if h % p or w % p:
            raise ValueError(f"latent {h}x{w} not divisible by patch size {p}")
        d = cfg.hidden_dim
        self.cfg = cfg
        self.latent_shape = tuple(latent_shape)
        self.num_patches = (h // p) * (w // p)
        self.patch_embed = Linear(p * p * c, d, rng, bias=True)
        self.pos_embed = _param(rng.normal(0.0, 0.5, (self.num_patches, d)))
        self.reference_embed = _param(rng.normal(0.0, 0.5, (1, d)))
        self.registers = _param(rng.normal(0.0, 0.5, (cfg.register_tokens, d)))
        self.blocks = [GenerationBlock(d, cfg.heads, rng) for _ in range(cfg.depth)]
        self.final_norm = RMSNorm(d)
        self.head = Linear(d, p * p * c, rng, bias=True, zero=True)

    def embed_latent(self, latent) -> Tensor:
        """Shared patchify layer: (B, H, W, C) -> (B, L_v, d_g), no positions."""
        latent = latent if isinstance(latent, Tensor) else Tensor(latent, dtype=self.patch_embed.weight.dtype)
        return self.patch_embed(patchify(latent, self.cfg.patch_size))

    def visual_tokens(self, z_t, reference=None) -> Tensor:
        x = self.embed_latent(z_t) + self.pos_embed
        batch = x.shape[0]
        parts = []
        if self.cfg.register_tokens:
            parts.append(T.broadcast_to(self.registers, (batch, *self.registers.shape)))
        parts.append(x)
        if reference is not None:
            parts.append(self.embed_latent(reference) + self.pos_embed + self.reference_embed)
        return T.concat(parts, axis=1) if len(parts) > 1 else x

    def head_out(self, x: Tensor) -> Tensor:
        r = self.cfg.register_tokens
        x = x[:, r:r + self.num_patches]
        h, w, _ = self.latent_shape
        return unpatchify(self.head(self.final_norm(x)), h, w, self.cfg.patch_size)

    def __call__(self, z_t, routed_contexts: Sequence[Tensor], context_mask: np.ndarray | None = None,
                 reference=None) -> Tensor:
        """Velocity for a (B, H, W, C) latent; block j reads ``routed_contexts[j]``."""
        if len(routed_contexts) != len(self.blocks):
            raise ValueError(f"expected {len(self.blocks)} routed contexts, got {len(routed_contexts)}")
        x = self.visual_tokens(z_t, reference)
        for block, ctx in zip(self.blocks, routed_contexts):
            x = block(x, ctx, context_mask)
        return self.head_out(x)


class MoSModel(Module):
    """Both towers, the shared context projection and the learned null context for CFG."""

    def __init__(self, cfg: ModelConfig, latent_shape: tuple[int, int, int], rng: np.random.Generator):
        self.cfg = cfg
        self.und = UnderstandingTower(cfg.und, latent_shape[-1], rng)
        self.gen = GenerationTower(cfg.gen, latent_shape, rng)
        self.proj = Linear(cfg.und.hidden_dim, cfg.gen.hidden_dim, rng)
        self.null_context = _param(rng.normal(0.0, 1.0, (1, cfg.und.hidden_dim)))
        self._bank_cache: dict = {}

    def encode(self, token_ids: Sequence[int], image_latent: np.ndarray | None = None) -> HiddenStateBank:
        """Cached understanding pass; valid because the tower is frozen."""
        key = (tuple(int(t) for t in token_ids),
               None if image_latent is None else np.ascontiguousarray(image_latent).tobytes(),
               self.und.token_embed.dtype.str)
        bank = self._bank_cache.get(key)
        if bank is None:
            bank = self._bank_cache[key] = self.und(token_ids, image_latent)
        return bank

    def clear_cache(self) -> None:
        self._bank_cache.clear()

    def astype(self, dtype) -> "MoSModel":
        super().astype(dtype)
        self.clear_cache()
        return self
