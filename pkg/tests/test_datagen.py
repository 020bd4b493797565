import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mos import datagen as D
from mos.datagen import SceneSpec


@st.composite
def scenes(draw, min_size=0):
    n = draw(st.integers(min_size, D.MAX_ENTITIES))
    cells = draw(st.lists(st.sampled_from(list(itertools.product(range(4), range(4)))),
                          min_size=n, max_size=n, unique=True))
    return SceneSpec(tuple(
        D.Entity(r, c, draw(st.sampled_from(D.SHAPES)), draw(st.sampled_from(list(D.COLORS))))
        for r, c in cells))


class TestRender:
    def test_empty_is_background(self):
        np.testing.assert_array_equal(D.render_scene(SceneSpec()), 0.5)

    def test_red_square_top_left(self):
        img = D.render_scene(SceneSpec.of(("red", "square", 0, 0)))
        red = np.all(img == [1.0, 0.0, 0.0], axis=-1)
        assert red[:8, :8].any()
        red[:8, :8] = False
        assert not red.any()

    def test_deterministic(self):
        spec = SceneSpec.of(("blue", "cross", 1, 2), ("white", "circle", 3, 3))
        assert D.render_scene(spec).tobytes() == D.render_scene(spec).tobytes()

    def test_overlap_rejected(self):
        with pytest.raises(ValueError, match="overlapping"):
            SceneSpec.of(("red", "square", 0, 0), ("blue", "circle", 0, 0))

    def test_shape_masks_are_distinguishable(self):
        for a, b in itertools.combinations(D.SHAPES, 2):
            corr = np.corrcoef(D.SHAPE_MASKS[a].ravel(), D.SHAPE_MASKS[b].ravel())[0, 1]
            assert corr < D.MASK_CORRELATION_MIN


class TestCaptions:
    def test_empty(self):
        assert D.caption_of(SceneSpec()) == [D.EMPTY]

    def test_one_entity_five_tokens(self):
        ids = D.caption_of(SceneSpec.of(("red", "square", 0, 0)))
        assert len(ids) == 5
        assert D.detokenize(ids) == "red square at 0 0"

    def test_vocabulary_bound(self):
        assert D.VOCAB_SIZE <= 64

    def test_round_trip_random(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            spec = D.random_scene(rng)
            assert D.parse_caption(D.caption_of(spec)) == spec

    @settings(max_examples=200, deadline=None)
    @given(scenes())
    def test_bijective(self, spec):
        assert D.parse_caption(D.caption_of(spec)) == spec

    def test_parse_prompt(self):
        spec = D.parse_prompt("Red square at 0 0, blue circle at 2 3")
        assert spec == SceneSpec.of(("red", "square", 0, 0), ("blue", "circle", 2, 3))
        assert D.parse_prompt("empty") == SceneSpec()

    @pytest.mark.parametrize("bad", ["purple square at 0 0", "red square 0 0", "red square at 4 0", ""])
    def test_bad_prompt_lists_grammar(self, bad):
        with pytest.raises(D.GrammarError, match="entity := COLOR SHAPE"):
            D.parse_prompt(bad)


class TestEditing:
    def test_operations(self):
        src = SceneSpec.of(("red", "square", 0, 0), ("blue", "circle", 1, 1))
        ins = D.tokenize
        assert D.apply_instruction(ins("recolor 0 0 to green"), src) == SceneSpec.of(
            ("green", "square", 0, 0), ("blue", "circle", 1, 1))
        assert D.apply_instruction(ins("move 1 1 to 3 3"), src) == SceneSpec.of(
            ("red", "square", 0, 0), ("blue", "circle", 3, 3))
        assert D.apply_instruction(ins("remove 0 0"), src) == SceneSpec.of(("blue", "circle", 1, 1))
        assert len(D.apply_instruction(ins("add white cross at 2 2"), src)) == 3

    def test_invalid_instructions(self):
        src = SceneSpec.of(("red", "square", 0, 0))
        for text in ("remove 1 1", "move 0 0", "add red square at 0 0"):
            with pytest.raises(D.GrammarError):
                D.apply_instruction(D.tokenize(text), src)

    def test_pairs_consistent_by_construction(self):
        pairs = D.make_edit_dataset(3, 200)
        ops = set()
        for p in pairs:
            assert D.apply_instruction(p.instruction, p.source) == p.target
            assert 1 <= len(p.target) <= D.MAX_ENTITIES
            ops.add(D.VOCAB[p.instruction[0]])
        assert ops == set(D.EDIT_OPS)


class TestCodec:
    def test_round_trip(self, rng):
        img = rng.random((32, 32, 3)).astype(np.float32)
        assert np.abs(D.decode_latent(D.encode_latent(img)) - img).max() < 1e-5

    def test_zero_image(self):
        np.testing.assert_array_equal(D.encode_latent(np.zeros((32, 32, 3))), 0.0)

    def test_latent_shape(self):
        assert D.encode_latent(np.zeros((32, 32, 3))).shape == (16, 16, 12) == D.LATENT_SHAPE

    def test_orthogonal(self):
        np.testing.assert_allclose(D.CODEC @ D.CODEC.T, np.eye(12), atol=1e-12)

    def test_batched(self, rng):
        imgs = rng.random((3, 32, 32, 3))
        lat = D.encode_latent(imgs)
        np.testing.assert_allclose(lat[1], D.encode_latent(imgs[1]), atol=1e-6)


class TestDatasets:
    def test_seed_reproducible(self):
        a, b = D.make_dataset(5, 20), D.make_dataset(5, 20)
        assert [s.caption for s in a] == [s.caption for s in b]
        assert all(np.array_equal(x.latent, y.latent) for x, y in zip(a, b))

    def test_size_one(self):
        data = D.make_dataset(0, 1)
        assert len(data) == 1
        caption, latent = data[0]
        assert latent.shape == D.LATENT_SHAPE and D.parse_caption(caption) == data[0].spec

    def test_size_zero_rejected(self):
        with pytest.raises(ValueError):
            D.make_dataset(0, 0)

    def test_entity_count_uniform(self):
        rng = np.random.default_rng(11)
        n = 10_000
        counts = np.bincount([len(D.random_scene(rng)) for _ in range(n)], minlength=5)[1:]
        p = 1 / 4
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) < 3 * sigma), counts

    def test_cache_round_trip(self, tmp_path):
        data = D.make_dataset(2, 5)
        D.save_dataset(tmp_path / "d.bin", data)
        raw = (tmp_path / "d.bin").read_bytes()
        assert raw[:4] == b"MOSD" and int.from_bytes(raw[8:16], "little") == 5
        back = D.load_dataset(tmp_path / "d.bin")
        assert [s.spec for s in back] == [s.spec for s in data]
        assert all(np.array_equal(x.latent, y.latent) for x, y in zip(back, data))

    def test_edit_cache_round_trip(self, tmp_path):
        pairs = D.make_edit_dataset(2, 7)
        D.save_edit_dataset(tmp_path / "e.bin", pairs)
        assert D.load_edit_dataset(tmp_path / "e.bin") == pairs


class TestAlignment:
    @settings(max_examples=100, deadline=None)
    @given(scenes(min_size=1))
    def test_self_consistency_through_codec(self, spec):
        img = D.decode_latent(D.encode_latent(D.render_scene(spec)))
        assert D.alignment_score(img, spec) == 1.0

    def test_background_scores_zero(self):
        bg = D.render_scene(SceneSpec())
        rng = np.random.default_rng(1)
        for _ in range(50):
            assert D.alignment_score(bg, D.random_scene(rng)) == 0.0

    def test_half_correct(self):
        spec = SceneSpec.of(("red", "square", 0, 0), ("blue", "triangle", 2, 1))
        only_first = D.render_scene(SceneSpec.of(("red", "square", 0, 0)))
        assert D.alignment_score(only_first, spec) == 0.5
        wrong_second = D.render_scene(SceneSpec.of(("red", "square", 0, 0), ("blue", "circle", 2, 1)))
        assert D.alignment_score(wrong_second, spec) == 0.5
        wrong_color = D.render_scene(SceneSpec.of(("red", "square", 0, 0), ("green", "triangle", 2, 1)))
        assert D.alignment_score(wrong_color, spec) == 0.5

    def test_empty_spec(self):
        assert D.alignment_score(D.render_scene(SceneSpec()), SceneSpec()) == 1.0


class TestNetpbm:
    def test_ppm_round_trip(self, tmp_path):
        img = D.render_scene(SceneSpec.of(("cyan", "cross", 3, 0)))
        D.write_ppm(tmp_path / "a.ppm", img)
        assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n32 32\n255\n")
        back = D.read_ppm(tmp_path / "a.ppm")
        np.testing.assert_allclose(back, img, atol=0.5 / 255)
        D.write_ppm(tmp_path / "b.ppm", back)
        assert (tmp_path / "b.ppm").read_bytes() == (tmp_path / "a.ppm").read_bytes()

    def test_pgm_round_trip(self, tmp_path):
        vals = np.linspace(0, 1, 12).reshape(3, 4)
        D.write_pgm(tmp_path / "h.pgm", vals)
        np.testing.assert_allclose(D.read_pgm(tmp_path / "h.pgm"), vals, atol=1 / 255)

    def test_bad_header(self, tmp_path):
        (tmp_path / "x.ppm").write_bytes(b"P5\n2 2\n255\n" + bytes(4))
        with pytest.raises(ValueError):
            D.read_ppm(tmp_path / "x.ppm")


class TestFlowSpace:
    def test_round_trip(self):
        img = D.render_scene(D.SceneSpec.of(("red", "circle", 1, 2)))
        assert np.abs(D.flow_to_image(D.image_to_flow(img)) - img).max() < 1e-5

    def test_standardizes_fresh_data(self):
        z = np.stack([D.normalize_latent(s.latent) for s in D.make_dataset(99, 256)])
        np.testing.assert_allclose(z.mean(axis=(0, 1, 2)), 0.0, atol=0.1)
        np.testing.assert_allclose(z.std(axis=(0, 1, 2)), 1.0, atol=0.1)

    def test_statistics_are_fixed(self):
        mean, std = D.latent_statistics()
        assert mean.shape == std.shape == (D.LATENT_SHAPE[-1],)
        assert np.all(std > 0)
