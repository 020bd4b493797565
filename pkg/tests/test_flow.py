import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mos import flow
from mos import tensor as T
from mos.config import ModelConfig, RouterConfig, SampleSchedule, TimestepSampler, TowerConfig
from mos.optim import AdamW
from mos.router import Router
from mos.tensor import Tensor
from mos.towers import MoSModel

LATENT = (4, 4, 3)


def _small(seed=0, k=2):
    cfg = ModelConfig(und=TowerConfig(3, 16, heads=2, vocab_size=24, register_tokens=0),
                      gen=TowerConfig(2, 16, heads=2, register_tokens=2),
                      router=RouterConfig(hidden_dim=8, heads=2, k=k))
    rng = np.random.default_rng(seed)
    model = MoSModel(cfg, LATENT, rng)
    return model, Router(cfg.router, cfg, rng)


def _randomize_heads(model, router, seed=1):
    r = np.random.default_rng(seed)
    for lin in (model.gen.head, router.head):
        lin.weight.data = (0.3 * r.normal(size=lin.weight.shape)).astype(np.float32)


def _batch(rng, b=3):
    return flow.Batch([[4, 9, 2], [5, 6], [7, 8, 12, 3]][:b], rng.normal(size=(b, *LATENT)).astype(np.float32))


class TestInterpolate:
    def test_endpoints_exact(self, rng):
        z0, z1 = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
        assert flow.interpolate_latent(z0, z1, 0.0).tobytes() == z0.tobytes()
        assert flow.interpolate_latent(z0, z1, 1.0).tobytes() == z1.tobytes()

    def test_midpoint(self):
        np.testing.assert_array_equal(flow.interpolate_latent(np.zeros(4), np.full(4, 2.0), 0.5), 1.0)

    def test_per_sample_t(self, rng):
        z0, z1 = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
        out = flow.interpolate_latent(z0, z1, np.array([0.0, 1.0]))
        np.testing.assert_array_equal(out[0], z0[0])
        np.testing.assert_array_equal(out[1], z1[1])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            flow.interpolate_latent(np.zeros(3), np.zeros(4), 0.5)


class TestLoss:
    def test_perfect(self, rng):
        z0, z1 = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
        assert flow.flow_loss(Tensor(z1 - z0), z0, z1).item() == 0.0

    def test_unit_target(self):
        assert flow.flow_loss(Tensor(np.zeros(6)), np.zeros(6), np.ones(6)).item() == 1.0

    def test_loop_oracle(self, rng):
        v, z0, z1 = (rng.normal(size=(3, 2, 4)) for _ in range(3))
        acc = 0.0
        for a, b, c in zip(v.ravel(), z0.ravel(), z1.ravel()):
            acc += (a - (c - b)) ** 2
        assert abs(flow.flow_loss(Tensor(v), z0, z1).item() - acc / v.size) < 1e-7

    @settings(max_examples=50, deadline=None)
    # dyadic grid values, so squared differences never underflow to zero
    @given(hnp.arrays(np.float64, 6, elements=st.integers(-80, 80).map(lambda i: i / 8)),
           hnp.arrays(np.float64, 6, elements=st.integers(-80, 80).map(lambda i: i / 8)))
    def test_nonnegative_zero_iff_equal(self, v, target):
        loss = flow.flow_loss(Tensor(v), np.zeros(6), target).item()
        assert loss >= 0
        assert (loss == 0) == bool(np.all(v == target))


class TestTimesteps:
    def test_uniform_mean(self):
        t = flow.sample_timestep(TimestepSampler("uniform"), np.random.default_rng(0), 100_000)
        assert abs(t.mean() - 0.5) < 0.005

    @pytest.mark.parametrize("strategy", ["uniform", "logit_normal", "mode"])
    def test_open_interval(self, strategy):
        t = flow.sample_timestep(TimestepSampler(strategy), np.random.default_rng(1), 100_000)
        assert np.all((t > 0) & (t < 1))

    def test_mode_shifts_to_noise(self):
        rng = np.random.default_rng(2)
        t = flow.sample_timestep(TimestepSampler("mode", 0.8, 3.0), rng, 100_000)
        u = flow.sample_timestep(TimestepSampler("uniform"), rng, 100_000)
        assert t.mean() > 0.5 and t.mean() > u.mean() + 0.05

    def test_mode_transform_reference(self):
        # reference: invert the CDF numerically by sampling u on a grid
        u = np.linspace(0.01, 0.99, 99)
        s, a = 0.8, 3.0
        base = 1 - u - s * (np.cos(np.pi * u / 2) ** 2 - 1 + u)
        expected = a * base / (1 + (a - 1) * base)

        class Grid:
            def random(self, size):
                return u
        got = flow.sample_timestep(TimestepSampler("mode", s, a), Grid(), u.size)
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_no_shift_scale_zero_is_uniform(self):
        rng = np.random.default_rng(3)
        a = flow.sample_timestep(TimestepSampler("mode", 0.0, 1.0), np.random.default_rng(3), 1000)
        np.testing.assert_allclose(a, np.clip(1 - rng.random(1000), 1e-5, 1 - 1e-5))


class TestSchedule:
    @pytest.mark.parametrize("spacing", ["linear", "linear_quadratic"])
    @pytest.mark.parametrize("steps", [1, 2, 5, 25])
    def test_strictly_decreasing(self, spacing, steps):
        ts = flow.schedule_timesteps(SampleSchedule(steps=steps, spacing=spacing))
        assert len(ts) == steps + 1 and ts[0] == 1.0 and ts[-1] == 0.0
        assert np.all(np.diff(ts) < 0)

    def test_linear_quadratic_denser_near_zero(self):
        ts = flow.schedule_timesteps(SampleSchedule(steps=20, spacing="linear_quadratic"))
        gaps = -np.diff(ts)
        assert gaps[-1] < gaps[0]
        np.testing.assert_allclose(gaps[:10], 0.05)

    def test_zero_steps(self):
        with pytest.raises(ValueError):
            flow.schedule_timesteps(SampleSchedule(steps=0))


class TestContext:
    def test_padding_and_null(self, rng):
        model, _ = _small()
        ctx = flow.build_context(model, [[1, 2, 3], [4]], drop=[False, True])
        assert ctx.bank.shape == (2, 3, 3, 16)
        np.testing.assert_array_equal(ctx.mask, [[True, True, True], [True, False, False]])
        np.testing.assert_array_equal(ctx.bank.data[1, :, 0], np.broadcast_to(model.null_context.data, (3, 16)))
        np.testing.assert_array_equal(ctx.bank.data[1, :, 1:], 0.0)

    def test_null_context_receives_gradient(self):
        model, _ = _small()
        ctx = flow.build_context(model, [[1, 2]], drop=[True])
        T.backward(ctx.bank.sum())
        assert np.all(model.null_context.grad == 3.0)

    def test_padding_does_not_change_velocity(self, rng):
        model, router = _small()
        _randomize_heads(model, router)
        z = rng.normal(size=(1, *LATENT)).astype(np.float32)
        alone = flow.build_context(model, [[4, 5]])
        padded = flow.build_context(model, [[4, 5], [1, 2, 3, 6]])
        with T.no_grad():
            a, _ = flow.predict_velocity(model, router, z, np.array([0.3]), alone, 0.0, rng)
            zz = np.concatenate([z, z])
            b, _ = flow.predict_velocity(model, router, zz, np.array([0.3, 0.3]), padded, 0.0, rng)
        np.testing.assert_allclose(a.data[0], b.data[0], atol=1e-5)


class TestTrainStep:
    def _opt(self, model, router):
        return AdamW({**model.trainable("m."), **router.trainable("r.")}, lr=1e-3)

    def test_frozen_tower_untouched(self, rng):
        model, router = _small()
        before = model.und.checksum()
        opt = self._opt(model, router)
        for s in range(3):
            flow.train_step(_batch(rng), model, router, opt, np.random.default_rng(s),
                            sampler=TimestepSampler(), epsilon=0.05, context_dropout_p=0.5)
        assert model.und.checksum() == before
        assert model.gen.checksum() != MoSModel(model.cfg, LATENT, np.random.default_rng(0)).gen.checksum()

    def test_deterministic(self):
        losses = []
        for _ in range(2):
            model, router = _small()
            opt = self._opt(model, router)
            data = _batch(np.random.default_rng(5))
            losses.append([flow.train_step(data, model, router, opt, np.random.default_rng(s),
                                           sampler=TimestepSampler(), epsilon=0.05, context_dropout_p=0.1)
                           for s in range(2)])
        assert losses[0] == losses[1]

    def test_nonfinite_aborts(self, rng):
        model, router = _small()
        opt = self._opt(model, router)
        data = _batch(rng)
        data.latents[0, 0, 0, 0] = np.nan
        before = model.gen.checksum()
        with pytest.raises(FloatingPointError):
            flow.train_step(data, model, router, opt, rng, sampler=TimestepSampler(), epsilon=0.0)
        assert model.gen.checksum() == before

    def test_single_sample_overfit(self):
        from mos.config import RunConfig
        from mos.training import Experiment

        cfg = RunConfig()
        cfg.data.size = 1
        cfg.train.steps = 500
        cfg.train.batch_size = 4
        exp = Experiment(cfg)
        first = exp.validation_loss()
        exp.run()
        assert exp.validation_loss() < 0.2 * first


class TestSample:
    def test_null_model_returns_noise(self, rng):
        model, router = _small()
        z = flow.sample(model, router, [[4, 5]], SampleSchedule(steps=1), np.random.default_rng(3))
        noise = np.random.default_rng(3).standard_normal((1, *LATENT)).astype(np.float32)
        np.testing.assert_array_equal(z, noise)

    def test_constant_field_integrates_exactly(self):
        model, router = _small()
        model.gen.head.bias.data[:] = 0.7
        z = flow.sample(model, router, [[4, 5]], SampleSchedule(steps=7), np.random.default_rng(3))
        noise = np.random.default_rng(3).standard_normal((1, *LATENT))
        np.testing.assert_allclose(z, noise - 0.7, atol=1e-5)

    def test_deterministic(self):
        model, router = _small()
        _randomize_heads(model, router)
        a = flow.sample(model, router, [[4, 5]], SampleSchedule(steps=4), np.random.default_rng(9))
        b = flow.sample(model, router, [[4, 5]], SampleSchedule(steps=4), np.random.default_rng(9))
        assert a.tobytes() == b.tobytes()

    def test_guidance_off_is_conditional_only(self, rng):
        model, router = _small()
        _randomize_heads(model, router)
        sched = SampleSchedule(steps=3, guidance_scale=0.0)
        ctx = flow.build_context(model, [[4, 5]])
        a = flow.integrate(model, router, ctx, sched, np.random.default_rng(1), 1)
        # explicit loop without any unconditional branch
        z = np.random.default_rng(1).standard_normal((1, *LATENT)).astype(np.float32)
        ts = flow.schedule_timesteps(sched)
        with T.no_grad():
            for t, tn in zip(ts[:-1], ts[1:]):
                v, _ = flow.predict_velocity(model, router, z, np.array([t]), ctx, 0.0, rng)
                z = (z - (t - tn) * v.data).astype(np.float32)
        assert a.tobytes() == z.tobytes()

    def test_guidance_one_equals_conditional(self, rng):
        model, router = _small()
        _randomize_heads(model, router)
        a = flow.sample(model, router, [[4, 5]], SampleSchedule(steps=3, guidance_scale=0.0), np.random.default_rng(1))
        b = flow.sample(model, router, [[4, 5]], SampleSchedule(steps=3, guidance_scale=1.0), np.random.default_rng(1))
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_guidance_changes_output(self):
        model, router = _small()
        _randomize_heads(model, router)
        a = flow.sample(model, router, [[4, 5]], SampleSchedule(steps=3, guidance_scale=0.0), np.random.default_rng(1))
        b = flow.sample(model, router, [[4, 5]], SampleSchedule(steps=3, guidance_scale=5.0), np.random.default_rng(1))
        assert not np.allclose(a, b)


class TestEdit:
    def test_shape_and_paths(self, rng):
        model, router = _small()
        _randomize_heads(model, router)
        ref = rng.normal(size=LATENT).astype(np.float32)
        sched = SampleSchedule(steps=2)
        outs = {arm: flow.edit_sample(model, router, ref, [[20, 5, 6]], sched, np.random.default_rng(0), arm)
                for arm in flow.EDIT_ARMS}
        assert all(o.shape == (1, *LATENT) for o in outs.values())
        assert not np.allclose(outs["full"], outs["no_gen"])
        assert not np.allclose(outs["full"], outs["no_und"])
        again = flow.edit_sample(model, router, ref, [[20, 5, 6]], sched, np.random.default_rng(0))
        assert again.tobytes() == outs["full"].tobytes()

    def test_reference_shape_checked(self):
        model, router = _small()
        with pytest.raises(ValueError):
            flow.edit_sample(model, router, np.zeros((8, 8, 3)), [[1]], SampleSchedule(steps=1),
                             np.random.default_rng(0))
