"""Static routing comparators that feed the same aggregation path as the learned router."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ROUTINGS
from .nn import Module
from .router import RoutingPlan
from .tensor import Tensor

FIXED_KINDS = ROUTINGS[1:]
ABLATION_COLUMNS = ("arm", "seed", "steps", "val_loss", "alignment", "wall_seconds")


def fixed_sources(kind: str, m: int, n: int) -> list[int]:
    """1-based source layer for each generation block."""
    if kind == "handcrafted_even":
        return [math.ceil(j * m / n) for j in range(1, n + 1)]
    if kind == "final_layer_only":
        return [m] * n
    if kind == "mot_one_to_one":
        if m != n:
            raise ValueError(f"mot_one_to_one: symmetric towers required (m={m}, n={n})")
        return list(range(1, n + 1))
    raise ValueError(f"unknown fixed routing {kind!r}; expected one of {FIXED_KINDS}")


def fixed_plan(kind: str, m: int, n: int, context_len: int, batch: int = 1) -> RoutingPlan:
    """One-hot plan, identical for every token, timestep and latent."""
    src = np.array(fixed_sources(kind, m, n)) - 1
    w = np.zeros((batch, context_len, m, n), dtype=np.float32)
    w[..., src, np.arange(n)] = 1.0
    indices = np.broadcast_to(src[:, None], (batch, context_len, n, 1)).copy()
    return RoutingPlan(Tensor(w), w > 0, indices, np.zeros((batch, context_len, n), dtype=bool))


class FixedRouter(Module):
    """Parameter-free router with the same ``route`` signature as the learned one."""

    def __init__(self, kind: str, m: int, n: int):
        fixed_sources(kind, m, n)
        self.kind, self.m, self.n = kind, m, n

    def route(self, model, t, z_t, bank: Tensor, context_mask, epsilon, rng) -> RoutingPlan:
        b, _, lc, _ = bank.shape
        plan = fixed_plan(self.kind, self.m, self.n, lc, b)
        plan.weights = Tensor(plan.weights.data.astype(bank.dtype))
        return plan


@dataclass
class AblationResult:
    arm: str
    seed: int
    steps: int
    val_loss: float
    alignment: float
    wall_seconds: float
    entropy: float = 0.0

    def row(self) -> list:
        return [self.arm, self.seed, self.steps, repr(self.val_loss), repr(self.alignment),
                f"{self.wall_seconds:.3f}"]


def write_ablation_csv(path: str | Path, results: list[AblationResult], append: bool = False) -> None:
    path = Path(path)
    fresh = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        out = csv.writer(fh)
        if fresh:
            fh.write("# mos ablation v1\n")
            out.writerow(ABLATION_COLUMNS)
        for r in results:
            out.writerow(r.row())


def read_ablation_csv(path: str | Path) -> list[AblationResult]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    return [AblationResult(r["arm"], int(r["seed"]), int(r["steps"]), float(r["val_loss"]),
                           float(r["alignment"]), float(r["wall_seconds"]))
            for r in rows]


def run_ablation(config, arm: str, steps: int | None = None, eval_prompts: int = 16,
                 csv_path: str | Path | None = None, progress=None) -> AblationResult:
    """Train one arm under the shared recipe, then score validation loss and alignment.

    Every arm uses the same seed, data, optimiser settings and step budget;
    only ``train.routing`` differs.
    """
    from .training import Experiment

    if arm not in ROUTINGS:
        raise ValueError(f"unknown arm {arm!r}; expected one of {ROUTINGS}")
    config.train.routing = arm
    if steps is not None:
        config.train.steps = steps
    config.validate()
    start = time.perf_counter()
    exp = Experiment(config)
    exp.run(progress=progress)
    val = exp.validation_loss()
    align = exp.alignment(eval_prompts)
    entropy = exp.routing_entropy()
    result = AblationResult(arm, config.seed, exp.step, val, align, time.perf_counter() - start, entropy)
    if csv_path is not None:
        write_ablation_csv(csv_path, [result], append=True)
    return result
