import numpy as np
import pytest

from mos import baselines as B
from mos import flow
from mos.config import ModelConfig, RouterConfig, RunConfig, TowerConfig
from mos.nn import Linear
from mos.router import aggregate_states, column_entropy
from mos.tensor import Tensor
from mos.towers import MoSModel


class TestFixedPlan:
    def test_handcrafted_even(self):
        assert B.fixed_sources("handcrafted_even", 8, 4) == [2, 4, 6, 8]

    def test_handcrafted_uneven_includes_last(self):
        src = B.fixed_sources("handcrafted_even", 7, 3)
        assert src == [3, 5, 7]

    @pytest.mark.parametrize("m", [1, 5, 8])
    def test_final_layer(self, m):
        assert B.fixed_sources("final_layer_only", m, 3) == [m, m, m]

    def test_mot(self):
        assert B.fixed_sources("mot_one_to_one", 4, 4) == [1, 2, 3, 4]
        with pytest.raises(ValueError, match="symmetric towers required"):
            B.fixed_sources("mot_one_to_one", 8, 4)
        with pytest.raises(ValueError, match="symmetric towers required"):
            B.FixedRouter("mot_one_to_one", 8, 4)

    @pytest.mark.parametrize("kind", B.FIXED_KINDS)
    def test_one_hot_columns(self, kind):
        plan = B.fixed_plan(kind, 4, 4, 3)
        w = plan.weights.data
        assert np.all(w.sum(-2) == 1.0) and np.all((w == 0) | (w == 1))
        assert np.all(plan.mask.sum(-2) == 1)

    def test_static_across_tokens(self):
        plan = B.fixed_plan("handcrafted_even", 8, 4, 5, batch=2)
        w = plan.weights.data
        assert all(w[b, t].tobytes() == w[0, 0].tobytes() for b in range(2) for t in range(5))

    def test_static_across_t_and_latent(self, rng):
        router = B.FixedRouter("handcrafted_even", 8, 4)
        bank = Tensor(rng.normal(size=(1, 8, 3, 4)))
        a = router.route(None, 0.1, rng.normal(size=(1, 4, 4, 3)), bank, None, 0.5, rng)
        b = router.route(None, 0.9, rng.normal(size=(1, 4, 4, 3)), bank, None, 0.5, rng)
        assert a.weights.data.tobytes() == b.weights.data.tobytes()
        np.testing.assert_array_equal(a.indices, b.indices)

    def test_passthrough_aggregation(self, rng):
        bank = Tensor(rng.normal(size=(1, 8, 3, 5)))
        proj = Linear(5, 6, rng)
        plan = B.fixed_plan("handcrafted_even", 8, 4, 3)
        out = aggregate_states(bank, plan, proj)
        for j, src in enumerate([2, 4, 6, 8]):
            np.testing.assert_allclose(out[j].data[0], bank.data[0, src - 1] @ proj.weight.data, atol=1e-6)

    def test_entropy_zero(self):
        assert column_entropy(B.fixed_plan("final_layer_only", 8, 4, 3)) == 0.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            B.fixed_sources("random", 4, 4)

    def test_drives_generation_tower(self, rng):
        cfg = ModelConfig(und=TowerConfig(8, 16, heads=2, register_tokens=0), gen=TowerConfig(4, 8, heads=2),
                          router=RouterConfig(hidden_dim=8, heads=2))
        model = MoSModel(cfg, (4, 4, 3), rng)
        ctx = flow.build_context(model, [[1, 2]])
        v, plan = flow.predict_velocity(model, B.FixedRouter("handcrafted_even", 8, 4),
                                        rng.normal(size=(1, 4, 4, 3)), np.array([0.5]), ctx, 0.0, rng)
        assert v.shape == (1, 4, 4, 3)


def _tiny_config():
    cfg = RunConfig()
    cfg.model.und.depth, cfg.model.und.hidden_dim = 4, 16
    cfg.model.gen.depth, cfg.model.gen.hidden_dim = 2, 16
    cfg.model.router.hidden_dim = 8
    cfg.train.steps, cfg.train.batch_size, cfg.train.warmup_steps = 4, 2, 1
    cfg.data.size = 4
    cfg.schedule.steps = 2
    return cfg


class TestRunAblation:
    def test_identical_arms_identical_metrics(self, tmp_path):
        a = B.run_ablation(_tiny_config(), "handcrafted_even", eval_prompts=2)
        b = B.run_ablation(_tiny_config(), "handcrafted_even", eval_prompts=2)
        assert (a.val_loss, a.alignment, a.entropy) == (b.val_loss, b.alignment, b.entropy)

    def test_learned_reports_entropy(self, tmp_path):
        path = tmp_path / "abl.csv"
        learned = B.run_ablation(_tiny_config(), "learned", eval_prompts=2, csv_path=path)
        fixed = B.run_ablation(_tiny_config(), "final_layer_only", eval_prompts=2, csv_path=path)
        assert learned.entropy > 0 and fixed.entropy == 0.0
        lines = path.read_text().splitlines()
        assert lines[0].startswith("#")
        assert lines[1] == ",".join(B.ABLATION_COLUMNS)
        rows = B.read_ablation_csv(path)
        assert [r.arm for r in rows] == ["learned", "final_layer_only"]
        assert rows[0].val_loss == learned.val_loss and rows[0].steps == 4

    def test_mot_rejected_for_asymmetric(self):
        from mos.config import ConfigError
        with pytest.raises(ConfigError):
            B.run_ablation(_tiny_config(), "mot_one_to_one", eval_prompts=1)
