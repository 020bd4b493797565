"""``mos`` command line: train, sample, edit, inspect-router, bench, grad-check, ablate."""

from __future__ import annotations

import argparse
import logging
import os
import statistics
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import checkpoint as K
from . import config as C
from . import datagen as D
from . import flow
from . import gradcheck
from . import tensor as T
from .router import aggregate_states, export_plan_csv

log = logging.getLogger("mos")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _deterministic():
    """Single BLAS thread when MOS_DETERMINISTIC=1, so reductions run in a fixed order."""
    if os.environ.get("MOS_DETERMINISTIC") == "1":
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=1)
    return nullcontext()


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise C.ConfigError(item, "override must look like key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def _schedule(args, base: C.SampleSchedule) -> C.SampleSchedule:
    s = C.SampleSchedule(**vars(base))
    if getattr(args, "sample_steps", None) is not None:
        s.steps = args.sample_steps
    if getattr(args, "guidance", None) is not None:
        s.guidance_scale = args.guidance
    if getattr(args, "spacing", None) is not None:
        s.spacing = args.spacing
    return s


# -- commands ------------------------------------------------------------------------------
def cmd_train(args) -> int:
    from .training import Experiment

    if args.resume:
        exp = K.load(args.resume)
        if args.set:
            raise C.ConfigError("--set", "overrides cannot change a resumed run")
    else:
        path = Path(args.config)
        if not path.is_file():
            print(f"error: config file not found: {path}", file=sys.stderr)
            return EXIT_USAGE
        cfg = C.apply_overrides(C.load(path), _overrides(args.set)).validate()
        exp = Experiment(cfg)
    cfg = exp.config
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = cfg.train.steps if args.steps is None else args.steps
    every = cfg.train.checkpoint_every

    def on_step(e):
        if every and e.step % every == 0:
            K.save(e, out / f"step_{e.step:07d}.ckpt")

    def progress(step, loss):
        if cfg.train.log_every and step % cfg.train.log_every == 0:
            log.info("step %d loss %.5f", step, loss)

    if exp.step == 0:
        K.save(exp, out / "step_0000000.ckpt")
    exp.run(target, progress=progress, log_path=out / "train_log.csv", on_step=on_step)
    K.save(exp, out / "final.ckpt")
    print(f"trained to step {exp.step}; checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_sample(args) -> int:
    exp = K.load(args.checkpoint)
    try:
        spec = D.parse_prompt(args.prompt)
    except D.GrammarError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL
    tokens = D.caption_of(spec)
    sched = _schedule(args, exp.config.schedule)
    z = flow.sample(exp.model, exp.router, [tokens] * args.count, sched, np.random.default_rng(args.seed))
    images = D.flow_to_image(z)
    out = Path(args.out)
    scores = []
    for i, img in enumerate(images):
        path = out if args.count == 1 else out.with_name(f"{out.stem}_{i}{out.suffix}")
        D.write_ppm(path, img)
        scores.append(D.alignment_score(img, spec))
        print(f"{path}\talignment={scores[-1]:.4f}")
    if args.count > 1:
        print(f"mean_alignment={np.mean(scores):.4f}")
    return EXIT_OK


def cmd_edit(args) -> int:
    if args.no_gen_context and args.no_und_context:
        print("error: at most one of --no-gen-context / --no-und-context", file=sys.stderr)
        return EXIT_USAGE
    exp = K.load(args.checkpoint)
    try:
        image = D.read_ppm(args.source)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL
    if image.shape != (D.CANVAS, D.CANVAS, 3):
        print(f"error: source image must be {D.CANVAS}x{D.CANVAS}, got {image.shape[:2]}", file=sys.stderr)
        return EXIT_FAIL
    try:
        instruction = D.tokenize(args.instruction)
        if args.source_prompt:
            target = D.apply_instruction(instruction, D.parse_prompt(args.source_prompt))
    except D.GrammarError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL
    arm = "no_gen" if args.no_gen_context else "no_und" if args.no_und_context else "full"
    sched = _schedule(args, exp.config.schedule)
    z = flow.edit_sample(exp.model, exp.router, D.image_to_flow(image)[None], [instruction], sched,
                         np.random.default_rng(args.seed), arm)
    img = D.flow_to_image(z[0])
    D.write_ppm(args.out, img)
    line = f"{args.out}\tarm={arm}"
    if args.source_prompt:
        line += f"\talignment={D.alignment_score(img, target):.4f}"
    print(line)
    return EXIT_OK


def router_heatmaps(exp, tokens: list[int], timesteps: list[float], seed: int = 0) -> list[np.ndarray]:
    """W-bar (L_c, m, n) at each timestep along the training path toward the prompt's own render."""
    spec = D.parse_caption(tokens)
    z0 = D.image_to_flow(D.render_scene(spec))[None]
    noise = np.random.default_rng(seed).standard_normal(z0.shape).astype(np.float32)
    ctx = flow.build_context(exp.model, [tokens])
    plans = []
    with T.no_grad():
        for t in timesteps:
            z_t = flow.interpolate_latent(z0, noise, t).astype(np.float32)
            plan = exp.router.route(exp.model, np.array([t]), z_t, ctx.bank, ctx.mask, 0.0,
                                    np.random.default_rng(seed))
            plans.append(plan.weights.data[0].astype(np.float64))
    return plans


def cmd_inspect_router(args) -> int:
    try:
        timesteps = [float(x) for x in args.timesteps.split(",") if x.strip()]
    except ValueError:
        print(f"error: cannot parse timesteps {args.timesteps!r}", file=sys.stderr)
        return EXIT_USAGE
    bad = [t for t in timesteps if not 0.0 <= t <= 1.0]
    if bad or not timesteps:
        print(f"error: timesteps must lie in [0, 1], got {bad or timesteps}", file=sys.stderr)
        return EXIT_FAIL
    exp = K.load(args.checkpoint)
    try:
        tokens = D.caption_of(D.parse_prompt(args.prompt))
    except D.GrammarError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plans = router_heatmaps(exp, tokens, timesteps, args.seed)
    rows = export_plan_csv(out / "routing.csv", list(zip(timesteps, plans)))
    for t, w in zip(timesteps, plans):
        tag = f"t{t:.3f}"
        mean = w.mean(axis=0)  # (m, n): per token average
        D.write_pgm(out / f"heatmap_{tag}.pgm", mean)
        D.write_pgm(out / f"layers_{tag}.pgm", mean.mean(axis=1, keepdims=True))
        D.write_pgm(out / f"tokens_{tag}.pgm", w.mean(axis=2).T)
        print(f"t={t:g}\tmean_weight={mean.mean():.6f}\tmin={mean.min():.6f}\tmax={mean.max():.6f}")
    print(f"rows={rows}\tcsv={out / 'routing.csv'}")
    return EXIT_OK


def bench(exp, iters: int = 100, batch: int | None = None, seed: int = 0) -> dict[str, float]:
    """Median wall seconds of the four inference phases of one denoising iteration."""
    batch = batch or exp.config.train.batch_size
    rng = np.random.default_rng(seed)
    specs = [D.random_scene(rng) for _ in range(batch)]
    tokens = [D.caption_of(s) for s in specs]
    z = rng.standard_normal((batch, *exp.model.gen.latent_shape)).astype(np.float32)
    t = np.full(batch, 0.5)
    ctx = flow.build_context(exp.model, tokens)
    timings = {"encode": [], "router": [], "generation": [], "decode": []}
    with T.no_grad():
        plan = exp.router.route(exp.model, t, z, ctx.bank, ctx.mask, 0.0, rng)
        routed = aggregate_states(ctx.bank, plan, exp.model.proj)
        for _ in range(iters):
            s = time.perf_counter()
            for ids in tokens:
                exp.model.und(ids)
            timings["encode"].append(time.perf_counter() - s)
            s = time.perf_counter()
            plan = exp.router.route(exp.model, t, z, ctx.bank, ctx.mask, 0.0, rng)
            timings["router"].append(time.perf_counter() - s)
            s = time.perf_counter()
            v = exp.model.gen(z, routed, ctx.mask)
            timings["generation"].append(time.perf_counter() - s)
            s = time.perf_counter()
            D.flow_to_image(v.data)
            timings["decode"].append(time.perf_counter() - s)
    med = {k: statistics.median(v) for k, v in timings.items()}
    med["router_share"] = med["router"] / (med["router"] + med["generation"])
    return med


def cmd_bench(args) -> int:
    exp = K.load(args.checkpoint)
    res = bench(exp, args.iters, args.batch)
    batch = args.batch or exp.config.train.batch_size
    print(f"# mos bench v1 batch={batch} iters={args.iters}")
    for key in ("encode", "router", "generation", "decode"):
        print(f"{key}_ms\t{1e3 * res[key]:.4f}")
    print(f"router_share_pct\t{100 * res['router_share']:.3f}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    start = time.perf_counter()
    report = gradcheck.run(args.seed)
    for line in report.lines():
        print(line)
    log.info("grad-check took %.1fs", time.perf_counter() - start)
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_ablate(args) -> int:
    from .baselines import run_ablation

    path = Path(args.config)
    if not path.is_file():
        print(f"error: config file not found: {path}", file=sys.stderr)
        return EXIT_USAGE
    base = C.apply_overrides(C.load(path), _overrides(args.set)).validate()
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    for seed in seeds:
        for arm in arms:
            cfg = C.parse(C.serialize(base))
            cfg.seed = seed
            r = run_ablation(cfg, arm, args.steps, args.eval_prompts, args.out)
            print(f"{r.arm}\tseed={r.seed}\tsteps={r.steps}\tval_loss={r.val_loss:.6f}\t"
                  f"alignment={r.alignment:.4f}\tentropy={r.entropy:.4f}\twall={r.wall_seconds:.1f}s")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------------
def _schedule_flags(p):
    p.add_argument("--sample-steps", type=int, help="Euler steps")
    p.add_argument("--guidance", type=float, help="classifier-free guidance scale (0 = conditional only)")
    p.add_argument("--spacing", choices=C.SPACINGS)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mos", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a key=value config")
    p.add_argument("config", nargs="?", default="")
    p.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE")
    p.add_argument("--steps", type=int, help="stop at this total step (default: train.steps)")
    p.add_argument("--resume", metavar="CKPT")
    p.add_argument("--out", help="output directory (default: out_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate a PPM from a prompt")
    p.add_argument("checkpoint")
    p.add_argument("prompt")
    p.add_argument("--out", default="sample.ppm")
    p.add_argument("--count", type=int, default=1)
    _schedule_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("edit", help="edit a 32x32 PPM following an instruction")
    p.add_argument("checkpoint")
    p.add_argument("source")
    p.add_argument("instruction")
    p.add_argument("--out", default="edit.ppm")
    p.add_argument("--source-prompt", help="caption of the source, to score the edit")
    p.add_argument("--no-gen-context", action="store_true", help="keep the reference out of the generation tower")
    p.add_argument("--no-und-context", action="store_true", help="keep the reference out of the understanding tower")
    _schedule_flags(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("inspect-router", help="export routing weights as CSV and PGM heatmaps")
    p.add_argument("checkpoint")
    p.add_argument("prompt")
    p.add_argument("--timesteps", default="0.9,0.5,0.1")
    p.add_argument("--out-dir", default="router_inspect")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_inspect_router)

    p = sub.add_parser("bench", help="time encode / router / generation / decode")
    p.add_argument("checkpoint")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--batch", type=int, help="default: train.batch_size")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("grad-check", help="finite-difference check of every trainable gradient")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", help="train each routing arm under one recipe and write a CSV")
    p.add_argument("config")
    p.add_argument("--arms", default="learned,handcrafted_even,final_layer_only")
    p.add_argument("--seeds", default="0")
    p.add_argument("--steps", type=int)
    p.add_argument("--eval-prompts", type=int, default=16)
    p.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", default="ablation.csv")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        with _deterministic():
            return args.func(args)
    except C.ConfigError as err:
        print(f"error: invalid config key {err.key}: {err}", file=sys.stderr)
        return EXIT_FAIL
    except K.CheckpointError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
