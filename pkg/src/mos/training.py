"""Experiment wiring: data, model, router, optimiser, the step loop and its evaluations."""

from __future__ import annotations

import csv
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import datagen as D
from . import flow
from .baselines import FixedRouter
from .config import RunConfig
from .optim import AdamW, lr_at
from .router import Router, column_entropy
from .tensor import no_grad
from .towers import MoSModel

EVAL_NOISE_SEED = 7_919
SAMPLE_SEED_OFFSET = 104_729
LOG_COLUMNS = ("step", "loss", "lr", "wall_seconds")


def build_router(config: RunConfig, rng: np.random.Generator):
    if config.train.routing == "learned":
        return Router(config.model.router, config.model, rng)
    return FixedRouter(config.train.routing, config.model.m, config.model.n)


def _t2i_batch(samples: list[D.Sample]) -> flow.Batch:
    return flow.Batch([s.caption for s in samples], D.normalize_latent(np.stack([s.latent for s in samples])))


def _edit_batch(pairs: list[D.EditPair], arm: str) -> flow.Batch:
    targets = np.stack([D.image_to_flow(D.render_scene(p.target)) for p in pairs])
    refs = np.stack([D.image_to_flow(D.render_scene(p.source)) for p in pairs])
    und, gen = flow.edit_inputs(refs, arm)
    return flow.Batch([list(p.instruction) for p in pairs], targets, und, gen)


class Experiment:
    """Everything a training run owns; step ``s`` always consumes ``default_rng([seed, s])``."""

    def __init__(self, config: RunConfig):
        self.config = config.validate()
        rng = np.random.default_rng(config.seed)
        self.model = MoSModel(config.model, D.LATENT_SHAPE, rng)
        self.router = build_router(config, rng)
        tc = config.train
        params = {**self.model.trainable("model."), **self.router.trainable("router.")}
        self.optimizer = AdamW(params, lr=tc.lr, betas=(tc.beta1, tc.beta2), weight_decay=tc.weight_decay)
        self.step = 0
        dc = config.data
        if dc.task == "t2i":
            self.train_items = D.make_dataset(dc.seed, dc.size)
            self.eval_items = self.train_items if dc.eval_seed < 0 else D.make_dataset(dc.eval_seed, dc.eval_size)
        else:
            self.train_items = D.make_edit_dataset(dc.seed, dc.size)
            self.eval_items = (self.train_items if dc.eval_seed < 0
                               else D.make_edit_dataset(dc.eval_seed, dc.eval_size))
        self.train_batch = self._batch(self.train_items)
        self.eval_batch = self._batch(self.eval_items)

    def _batch(self, items, arm: str | None = None) -> flow.Batch:
        if self.config.data.task == "t2i":
            return _t2i_batch(items)
        return _edit_batch(items, arm or self.config.data.edit_context)

    @staticmethod
    def _select(batch: flow.Batch, idx: np.ndarray) -> flow.Batch:
        return flow.Batch([batch.tokens[i] for i in idx], batch.latents[idx],
                          None if batch.und_images is None else [batch.und_images[i] for i in idx],
                          None if batch.references is None else batch.references[idx])

    def lr(self, step: int) -> float:
        tc = self.config.train
        return lr_at(step, tc.lr, tc.warmup_steps, tc.steps, tc.min_lr)

    def train_one(self) -> float:
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, self.step])
        size = len(self.train_items)
        b = cfg.train.batch_size
        idx = rng.choice(size, b, replace=size < b)
        loss = flow.train_step(
            self._select(self.train_batch, idx), self.model, self.router, self.optimizer, rng,
            sampler=cfg.timesteps, epsilon=cfg.model.router.epsilon,
            context_dropout_p=cfg.schedule.context_dropout_p, lr=self.lr(self.step))
        self.step += 1
        return loss

    def run(self, steps: int | None = None, progress: Callable[[int, float], None] | None = None,
            log_path: str | Path | None = None, on_step: Callable[["Experiment"], None] | None = None
            ) -> list[float]:
        """Train until ``steps`` total steps (default: the configured budget)."""
        target = self.config.train.steps if steps is None else steps
        losses = []
        log = _open_log(log_path) if log_path else None
        start = time.perf_counter()
        try:
            while self.step < target:
                lr = self.lr(self.step)
                loss = self.train_one()
                losses.append(loss)
                if log is not None:
                    log[1].writerow([self.step, repr(loss), repr(lr), f"{time.perf_counter() - start:.4f}"])
                if progress is not None:
                    progress(self.step, loss)
                if on_step is not None:
                    on_step(self)
        finally:
            if log is not None:
                log[0].close()
        return losses

    # -- evaluation ------------------------------------------------------------------
    def validation_loss(self, batch: flow.Batch | None = None) -> float:
        return flow.evaluate_loss(self.model, self.router, batch or self.eval_batch,
                                  EVAL_NOISE_SEED + self.config.seed)

    def generate(self, count: int, arm: str | None = None, seed: int | None = None) -> np.ndarray:
        """Sample images for the first ``count`` evaluation items."""
        items = self.eval_items[:count]
        rng = np.random.default_rng(SAMPLE_SEED_OFFSET + self.config.seed if seed is None else seed)
        sched = self.config.schedule
        if self.config.data.task == "t2i":
            z = flow.sample(self.model, self.router, [s.caption for s in items], sched, rng)
        else:
            refs = np.stack([D.image_to_flow(D.render_scene(p.source)) for p in items])
            z = flow.edit_sample(self.model, self.router, refs, [list(p.instruction) for p in items],
                                 sched, rng, arm or self.config.data.edit_context)
        return D.flow_to_image(z)

    def alignment(self, count: int = 16, arm: str | None = None) -> float:
        images = self.generate(count, arm)
        specs = [it.spec if isinstance(it, D.Sample) else it.target for it in self.eval_items[:count]]
        return float(np.mean([D.alignment_score(img, s) for img, s in zip(images, specs)]))

    def routing_entropy(self, count: int = 16, timesteps=(0.1, 0.5, 0.9)) -> float:
        if not isinstance(self.router, Router):
            return 0.0
        batch = self._select(self.eval_batch, np.arange(min(count, len(self.eval_items))))
        rng = np.random.default_rng(0)
        values = []
        with no_grad():
            ctx = flow.build_context(self.model, batch.tokens, batch.und_images)
            for t in timesteps:
                z_t = flow.interpolate_latent(batch.latents, rng.standard_normal(batch.latents.shape), t)
                plan = self.router.route(self.model, np.full(len(batch), t), z_t.astype(np.float32),
                                         ctx.bank, ctx.mask, 0.0, rng)
                values.append(column_entropy(plan, ctx.mask))
        return float(np.mean(values))


def _open_log(path: str | Path):
    path = Path(path)
    fresh = not path.exists()
    fh = open(path, "a", newline="")
    out = csv.writer(fh)
    if fresh:
        fh.write("# mos train log v1\n")
        out.writerow(LOG_COLUMNS)
    return fh, out
