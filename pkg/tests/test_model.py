"""Generator/critic assembly, shape contracts and weight sharing."""
import numpy as np
import pytest

from revgan3d import tensor as T
from revgan3d.errors import ConfigError, ShapeError
from revgan3d.model import Discriminator, ModelConfig, RevGANModel
from revgan3d.tensor import Tape, Tensor, backward, no_grad

from conftest import randomize_params, tiny_model


def vol(rng, *shape, dtype=np.float64):
    return Tensor(rng.uniform(-1, 1, size=(1, 1) + shape).astype(dtype))


class TestConfig:
    def test_round_trip_dict(self):
        cfg = ModelConfig(task="super-resolution", depth=4)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"depth": 1, "width": 3})

    @pytest.mark.parametrize("kwargs", [dict(task="denoise"), dict(depth=-1),
                                        dict(core_channels=7), dict(dtype="float16"),
                                        dict(arch="identity", task="super-resolution")])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            ModelConfig(**kwargs)

    def test_y_scale(self):
        assert ModelConfig(task="super-resolution").y_scale == (4, 2, 2)
        assert ModelConfig().y_scale == (1, 1, 1)


class TestShapes:
    def test_domain_adaptation_preserves_extent(self, rng):
        model = tiny_model(dtype="float32")
        with no_grad():
            assert model.translate_xy(vol(rng, 16, 16, 16, dtype=np.float32)).shape == \
                (1, 1, 16, 16, 16)

    def test_super_resolution_upscales(self, rng):
        model = tiny_model(task="super-resolution", dtype="float32")
        with no_grad():
            hr = model.translate_xy(vol(rng, 4, 8, 8, dtype=np.float32))
            lr = model.translate_yx(vol(rng, 16, 16, 16, dtype=np.float32))
        assert hr.shape == (1, 1, 16, 16, 16)
        assert lr.shape == (1, 1, 4, 8, 8)

    def test_outputs_bounded(self, rng):
        model = tiny_model()
        randomize_params(model, rng, 1.0)
        with no_grad():
            out = model.translate_xy(vol(rng, 8, 8, 8)).data
        assert np.all(np.abs(out) <= 1.0)

    def test_indivisible_extent_names_axis(self, rng):
        model = tiny_model()
        with pytest.raises(ShapeError, match="along H"):
            model.translate_xy(vol(rng, 8, 7, 8))

    def test_sr_encoder_stride(self, rng):
        model = tiny_model(task="super-resolution")
        with pytest.raises(ShapeError, match="along D"):
            model.translate_yx(vol(rng, 12, 16, 16))

    @pytest.mark.parametrize("n,expect", [(64, 7), (32, 3), (16, 1)])
    def test_score_extent(self, n, expect, rng):
        assert Discriminator.score_extent(n) == expect
        if n <= 32:
            d = Discriminator(1, (2, 2, 2), rng=rng, dtype=np.float64)
            with no_grad():
                assert d(vol(rng, n, n, n)).shape == (1, 1) + (expect,) * 3

    def test_discriminator_too_small(self, rng):
        d = Discriminator(1, (2, 2, 2), rng=rng)
        with pytest.raises(ShapeError, match="along W"):
            d(vol(rng, 16, 16, 8))


class TestSharing:
    def test_shared_parameters_are_the_core(self):
        model = tiny_model()
        shared = {id(p) for p in model.shared_parameters()}
        assert shared == {id(p) for p in model.core.parameters()}

    def test_core_perturbation_moves_both_directions(self, rng):
        model = tiny_model()
        randomize_params(model.core, rng)
        x, y = vol(rng, 8, 8, 8), vol(rng, 8, 8, 8)
        with no_grad():
            before = model.translate_xy(x).data, model.translate_yx(y).data
            model.core.blocks[0].f_net[0].weight.data += 0.5
            after = model.translate_xy(x).data, model.translate_yx(y).data
        assert not np.allclose(before[0], after[0])
        assert not np.allclose(before[1], after[1])

    def test_encoder_perturbation_is_one_sided(self, rng):
        model = tiny_model()
        y = vol(rng, 8, 8, 8)
        with no_grad():
            before = model.translate_yx(y).data
            model.enc_x.body[0].weight.data += 0.5
            after = model.translate_yx(y).data
        np.testing.assert_array_equal(before, after)

    def test_core_gradients_from_both_directions(self, rng):
        model = tiny_model()
        randomize_params(model.core, rng)
        x, y = vol(rng, 8, 8, 8), vol(rng, 8, 8, 8)
        for fn in (model.translate_xy, model.translate_yx):
            model.zero_grad()
            with Tape():
                loss = T.mean(T.square(fn(x if fn == model.translate_xy else y)))
            backward(loss)
            assert all(p.grad is not None and np.any(p.grad) for p in
                       model.core.blocks[0].f_net[0].parameters()[:1])


class TestIdentityArch:
    def test_cycle_is_exact(self, rng):
        model = RevGANModel(ModelConfig(arch="identity", image_channels=2, depth=3,
                                        dtype="float64", disc_channels=(2, 2, 2)),
                            rng=rng)
        randomize_params(model.core, rng)
        x = Tensor(rng.normal(size=(1, 2, 4, 4, 4)))
        with no_grad():
            assert np.max(np.abs(model.cycle_xyx(x).data - x.data)) < 1e-11
            assert np.max(np.abs(model.cycle_yxy(x).data - x.data)) < 1e-11

    def test_untrained_translation_is_identity(self, rng):
        model = RevGANModel(ModelConfig(arch="identity", depth=2, image_channels=2),
                            rng=rng)
        x = Tensor(rng.normal(size=(1, 2, 4, 4, 4)).astype(np.float32))
        with no_grad():
            np.testing.assert_array_equal(model.translate_xy(x).data, x.data)


class TestMemoryModes:
    def test_outputs_identical(self, rng):
        x = vol(rng, 8, 8, 8)
        outs = []
        for memory in ("reversible", "naive"):
            model = tiny_model(memory=memory)
            randomize_params(model.core, np.random.default_rng(5))
            x.requires_grad = True
            with Tape():
                outs.append(model.translate_xy(x).data)
        np.testing.assert_array_equal(*outs)

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            tiny_model(memory="sometimes")
