"""End-to-end finite-difference check of every trainable gradient through one training forward.

The analytic gradient is taken in float32. The oracle is a central
difference on a float64 copy of the same model, because float32 rounding
alone exceeds the tolerance at h=1e-4. The discrete top-k selection is
frozen after the first forward so both sides differentiate the same branch.
Three source layers with k=2 keep a real sparse selection in the graph; with
k=1 the routed weight is a pure scale that the context norm removes, so its
gradient is numerically zero and the comparison would only measure noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import flow
from . import tensor as T
from .config import ModelConfig, RouterConfig, TimestepSampler, TowerConfig
from .router import Router, RoutingPlan, aggregate_states, normalize_columns, plan_from_weights
from .towers import MoSModel

STEP = 1e-4
TOLERANCE = 1e-3
FLOOR = 1e-6
LATENT = (4, 4, 3)


@dataclass
class GradReport:
    seed: int
    errors: dict[str, float]
    frozen: list[str]

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE

    def lines(self) -> list[str]:
        out = [f"grad-check seed={self.seed} tensors={len(self.errors)} h={STEP:g}"]
        for name, err in self.errors.items():
            out.append(f"{name}\t{err:.3e}")
        out.append(f"frozen\t{len(self.frozen)} tensors, gradients absent")
        out.append(f"max_relative_error\t{self.max_error:.3e}")
        out.append("PASS" if self.passed else "FAIL")
        return out


def micro_config() -> ModelConfig:
    return ModelConfig(
        und=TowerConfig(depth=3, hidden_dim=8, heads=2, vocab_size=16, register_tokens=0),
        gen=TowerConfig(depth=2, hidden_dim=8, heads=2, register_tokens=1),
        router=RouterConfig(hidden_dim=8, heads=2, k=2, epsilon=0.5),
    )


def _perturb(model, router, rng):
    """Move every parameter off its special init (zero heads, unit gains) so no gradient is trivially zero."""
    for module in (model, router):
        for _, p in module.named_parameters():
            if p.requires_grad:
                p.data = (p.data + 0.3 * rng.standard_normal(p.shape)).astype(p.dtype)


class _Case:
    def __init__(self, seed: int):
        rng = np.random.default_rng(seed)
        cfg = micro_config()
        self.model = MoSModel(cfg, LATENT, rng)
        self.router = Router(cfg.router, cfg, rng)
        _perturb(self.model, self.router, rng)
        self.tokens = [[3, 7], []]
        self.drop = np.array([False, True])
        self.t = flow.sample_timestep(TimestepSampler("uniform"), rng, 2)
        self.z0 = rng.standard_normal((2, *LATENT))
        self.z1 = rng.standard_normal((2, *LATENT))
        self.select_rng_seed = seed + 1
        self.plan: RoutingPlan | None = None

    def loss(self, dtype) -> T.Tensor:
        model, router = self.model, self.router
        ctx = flow.build_context(model, self.tokens, drop=self.drop)
        z_t = flow.interpolate_latent(self.z0, self.z1, self.t).astype(dtype)
        w = normalize_columns(router.logits(model, self.t, z_t, ctx.final, ctx.mask))
        if self.plan is None:
            self.plan = plan_from_weights(w, router.cfg.k, router.cfg.epsilon,
                                          np.random.default_rng(self.select_rng_seed))
        plan = RoutingPlan(w, self.plan.mask, self.plan.indices, self.plan.explored)
        routed = aggregate_states(ctx.bank, plan, model.proj)
        v = model.gen(z_t, routed, ctx.mask)
        return flow.flow_loss(v, self.z0.astype(dtype), self.z1.astype(dtype))

    def params(self) -> dict[str, T.Tensor]:
        return {**self.model.trainable("model."), **self.router.trainable("router.")}


def run(seed: int = 0) -> GradReport:
    case = _Case(seed)
    loss = case.loss(np.float32)
    T.backward(loss)
    params = case.params()
    analytic = {n: (p.grad if p.grad is not None else np.zeros(p.shape)).astype(np.float64)
                for n, p in params.items()}
    frozen = [n for n, p in case.model.named_parameters("model.") if not p.requires_grad]
    leaked = [n for n, p in case.model.named_parameters("model.") if not p.requires_grad and p.grad is not None]
    if leaked:
        raise RuntimeError(f"frozen tensors received gradients: {leaked}")

    case.model.astype(np.float64)
    case.router.astype(np.float64)
    errors = {}
    with T.no_grad():
        for name, p in params.items():
            numeric = np.zeros(p.shape)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + STEP
                up = case.loss(np.float64).item()
                flat[i] = orig - STEP
                down = case.loss(np.float64).item()
                flat[i] = orig
                numeric.reshape(-1)[i] = (up - down) / (2 * STEP)
            scale = max(np.abs(numeric).max(), FLOOR)
            errors[name] = float(np.abs(analytic[name] - numeric).max() / scale)
    return GradReport(seed, errors, frozen)
