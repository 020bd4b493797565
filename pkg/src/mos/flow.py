"""Rectified flow: timestep sampling, the velocity objective, training steps and Euler sampling.

Data sits at t=0 and Gaussian noise at t=1 on the straight path
``z_t = (1 - t) z0 + t z1``; the model regresses ``z1 - z0`` and sampling
integrates from t=1 down to t=0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import SampleSchedule, TimestepSampler
from .optim import AdamW
from .router import aggregate_states
from .tensor import Tensor

T_MIN = 1e-5


# -- path and objective --------------------------------------------------------------------
def interpolate_latent(z0: np.ndarray, z1: np.ndarray, t) -> np.ndarray:
    """``(1 - t) z0 + t z1`` with a scalar t or one t per leading batch entry."""
    z0, z1 = np.asarray(z0), np.asarray(z1)
    if z0.shape != z1.shape:
        raise ValueError(f"shape mismatch: {z0.shape} vs {z1.shape}")
    t = np.asarray(t, dtype=z0.dtype)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim:
        t = t.reshape(t.shape + (1,) * (z0.ndim - t.ndim))
    return (1 - t) * z0 + t * z1


def flow_loss(predicted_v: Tensor, z0: np.ndarray, z1: np.ndarray) -> Tensor:
    """Mean squared error against the straight-path velocity ``z1 - z0``."""
    target = np.asarray(z1) - np.asarray(z0)
    if predicted_v.shape != target.shape:
        raise ValueError(f"prediction {predicted_v.shape} does not match target {target.shape}")
    diff = predicted_v - target.astype(predicted_v.dtype)
    return T.mean(diff * diff)


def sample_timestep(sampler: TimestepSampler, rng: np.random.Generator, size=None):
    """Draw training timesteps strictly inside (0, 1).

    ``mode`` uses ``t = 1 - u - s (cos^2(pi u / 2) - 1 + u)`` followed by the
    shift map ``t -> a t / (1 + (a - 1) t)``; positive shift moves mass toward
    the noisy end.
    """
    if sampler.strategy == "uniform":
        t = rng.random(size)
    elif sampler.strategy == "logit_normal":
        t = 1.0 / (1.0 + np.exp(-rng.standard_normal(size)))
    elif sampler.strategy == "mode":
        u = rng.random(size)
        t = 1.0 - u - sampler.mode_scale * (np.cos(np.pi * u / 2) ** 2 - 1.0 + u)
        a = sampler.mode_shift
        t = a * t / (1.0 + (a - 1.0) * t)
    else:
        raise ValueError(f"unknown timestep strategy {sampler.strategy!r}")
    return np.clip(t, T_MIN, 1.0 - T_MIN)


def schedule_timesteps(schedule: SampleSchedule) -> np.ndarray:
    """``steps + 1`` strictly decreasing times from 1 to 0."""
    n = schedule.steps
    if n < 1:
        raise ValueError("sampling needs at least one step")
    if schedule.spacing == "linear":
        return np.linspace(1.0, 0.0, n + 1)
    if schedule.spacing == "linear_quadratic":
        if n == 1:
            return np.array([1.0, 0.0])
        half = n // 2
        lin = np.linspace(1.0, 0.5, half + 1)
        q = np.linspace(0.0, 1.0, n - half + 1)[1:]
        quad = 0.5 * (1.0 - q) ** 2
        return np.concatenate([lin, quad])
    raise ValueError(f"unknown spacing {schedule.spacing!r}")


# -- batched context -----------------------------------------------------------------------
@dataclass
class Batch:
    """Training examples: caption or instruction tokens and target latents.

    ``und_images`` are reference latents appended to the understanding
    context; ``references`` are clean latents appended to the generation sequence.
    """

    tokens: list[list[int]]
    latents: np.ndarray
    und_images: list[np.ndarray | None] | None = None
    references: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Context:
    bank: Tensor  # (B, m, L, d_u)
    mask: np.ndarray  # (B, L), False on padding

    @property
    def final(self) -> Tensor:
        return self.bank[:, -1]


def build_context(model, tokens: Sequence[Sequence[int]], images=None, drop=None) -> Context:
    """Pad per-sample banks to a common length; dropped samples get the learned null context."""
    b = len(tokens)
    images = images if images is not None else [None] * b
    drop = np.zeros(b, dtype=bool) if drop is None else np.asarray(drop, dtype=bool)
    banks = [None if d else model.encode(ids, img) for ids, img, d in zip(tokens, images, drop)]
    length = max([1] + [bk.length for bk in banks if bk is not None])
    m, d_u = model.cfg.m, model.cfg.und.hidden_dim
    dtype = model.null_context.dtype
    const = np.zeros((b, m, length, d_u), dtype=dtype)
    mask = np.zeros((b, length), dtype=bool)
    for i, bk in enumerate(banks):
        if bk is None:
            mask[i, 0] = True
        else:
            const[i, :, : bk.length] = bk.states
            mask[i, : bk.length] = True
    bank = Tensor(const)
    if drop.any():
        gate = np.zeros((b, 1, length, 1), dtype=dtype)
        gate[drop, 0, 0, 0] = 1.0
        bank = bank + Tensor(gate) * model.null_context
    return Context(bank, mask)


def null_context(model, batch: int) -> Context:
    return build_context(model, [[]] * batch, drop=np.ones(batch, dtype=bool))


def predict_velocity(model, router, z_t, t, ctx: Context, epsilon: float, rng: np.random.Generator,
                     reference=None):
    """Route, mix and run the generation tower. Returns ``(velocity, plan)``."""
    plan = router.route(model, t, z_t, ctx.bank, ctx.mask, epsilon, rng)
    routed = aggregate_states(ctx.bank, plan, model.proj)
    return model.gen(z_t, routed, ctx.mask, reference), plan


# -- training ------------------------------------------------------------------------------
def train_step(batch: Batch, model, router, optimizer: AdamW, rng: np.random.Generator, *,
               sampler: TimestepSampler, epsilon: float, context_dropout_p: float = 0.0,
               lr: float | None = None) -> float:
    """One optimisation step on the flow objective; the understanding tower is untouched."""
    b = len(batch)
    z0 = np.asarray(batch.latents, dtype=model.null_context.dtype)
    drop = rng.random(b) < context_dropout_p
    t = sample_timestep(sampler, rng, b)
    z1 = rng.standard_normal(z0.shape).astype(z0.dtype)
    z_t = interpolate_latent(z0, z1, t)
    ctx = build_context(model, batch.tokens, batch.und_images, drop)
    v, _ = predict_velocity(model, router, z_t, t, ctx, epsilon, rng, batch.references)
    loss = flow_loss(v, z0, z1)
    value = loss.item()
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value}")
    optimizer.zero_grad()
    T.backward(loss)
    optimizer.step(lr)
    return value


def evaluate_loss(model, router, batch: Batch, seed: int, points: int = 8, chunk: int = 32) -> float:
    """Deterministic validation loss on a stratified t grid, no exploration and no dropout."""
    ts = (np.arange(points) + 0.5) / points
    rng = np.random.default_rng(seed)
    z0 = np.asarray(batch.latents, dtype=model.null_context.dtype)
    total = 0.0
    with T.no_grad():
        for t in ts:
            noise = rng.standard_normal(z0.shape).astype(z0.dtype)
            for s in range(0, len(batch), chunk):
                sl = slice(s, s + chunk)
                z1 = noise[sl]
                z_t = interpolate_latent(z0[sl], z1, t)
                imgs = batch.und_images[sl] if batch.und_images is not None else None
                refs = batch.references[sl] if batch.references is not None else None
                ctx = build_context(model, batch.tokens[sl], imgs)
                tt = np.full(len(z1), t)
                v, _ = predict_velocity(model, router, z_t, tt, ctx, 0.0, rng, refs)
                total += flow_loss(v, z0[sl], z1).item() * len(z1)
    return total / (len(ts) * len(batch))


# -- sampling ------------------------------------------------------------------------------
def _guided(model, router, z, t, ctx, null, guidance: float, rng, reference=None) -> np.ndarray:
    tt = np.full(len(z), t)
    v_c, _ = predict_velocity(model, router, z, tt, ctx, 0.0, rng, reference)
    if guidance == 0.0:
        return v_c.data
    v_u, _ = predict_velocity(model, router, z, tt, null, 0.0, rng, reference)
    return v_u.data + guidance * (v_c.data - v_u.data)


def integrate(model, router, ctx: Context, schedule: SampleSchedule, rng: np.random.Generator,
              batch: int, reference=None, noise: np.ndarray | None = None) -> np.ndarray:
    """Euler integration from noise at t=1 to a latent at t=0 with optional guidance."""
    ts = schedule_timesteps(schedule)
    shape = (batch, *model.gen.latent_shape)
    dtype = model.null_context.dtype
    z = rng.standard_normal(shape).astype(dtype) if noise is None else np.array(noise, dtype=dtype)
    g = float(schedule.guidance_scale)
    null = null_context(model, batch) if g != 0.0 else None
    with T.no_grad():
        for t, t_next in zip(ts[:-1], ts[1:]):
            v = _guided(model, router, z, t, ctx, null, g, rng, reference)
            z = (z - (t - t_next) * v).astype(dtype)
    return z


def sample(model, router, tokens: Sequence[Sequence[int]], schedule: SampleSchedule,
           rng: np.random.Generator) -> np.ndarray:
    """Generate one latent per token sequence."""
    ctx = build_context(model, tokens)
    return integrate(model, router, ctx, schedule, rng, len(tokens))


EDIT_ARMS = ("full", "no_gen", "no_und")


def edit_inputs(references: np.ndarray, arm: str):
    """Split clean reference latents between the two towers according to the ablation arm."""
    if arm not in EDIT_ARMS:
        raise ValueError(f"unknown edit context {arm!r}; expected one of {EDIT_ARMS}")
    und = [None] * len(references) if arm == "no_und" else list(references)
    gen = None if arm == "no_gen" else references
    return und, gen


def edit_sample(model, router, reference_latents: np.ndarray, instructions: Sequence[Sequence[int]],
                schedule: SampleSchedule, rng: np.random.Generator, arm: str = "full") -> np.ndarray:
    """Edit clean reference latents following token instructions.

    The reference enters the understanding tower after the instruction and the
    generation tower after the noisy latent; only the noisy slice is denoised.
    """
    refs = np.asarray(reference_latents, dtype=model.null_context.dtype)
    if refs.ndim == len(model.gen.latent_shape):
        refs = refs[None]
    if refs.shape[1:] != model.gen.latent_shape:
        raise ValueError(f"reference latent {refs.shape[1:]} does not match {model.gen.latent_shape}")
    if len(instructions) != len(refs):
        raise ValueError("one instruction per reference latent is required")
    und, gen = edit_inputs(refs, arm)
    ctx = build_context(model, instructions, und)
    return integrate(model, router, ctx, schedule, rng, len(refs), reference=gen)
