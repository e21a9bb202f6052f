"""Optimiser, training steps, fit loop, resume and checkpoints."""
import csv

import numpy as np
import pytest

from revgan3d import checkpoint
from revgan3d.data import make_phantom
from revgan3d.errors import ConfigError, FormatError, RevGANError
from revgan3d.loss import LossWeights
from revgan3d.nn import Parameter
from revgan3d.tensor import Tensor
from revgan3d.train import (Adam, NonFiniteLoss, OptimizerState, TrainConfig, VolumeSet,
                            adam_step, fit, make_optimizers, synthesize_pairs,
                            train_step_paired, train_step_unpaired)

from conftest import TINY, randomize_params, tiny_model


def patches(rng, n=16, dtype=np.float64):
    return (Tensor(rng.uniform(-1, 1, (1, 1, n, n, n)).astype(dtype)),
            Tensor(rng.uniform(-1, 1, (1, 1, n, n, n)).astype(dtype)))


def small_config(**kw):
    base = dict(epochs=2, patch_size=16, depth=1, base_channels=TINY["base_channels"],
                core_channels=TINY["core_channels"], disc_channels=list(TINY["disc_channels"]),
                seed=3)
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def dataset():
    rng = np.random.default_rng(0)
    return synthesize_pairs([make_phantom((16, 16, 16), rng) for _ in range(2)],
                            "domain-adaptation")


class TestAdam:
    def test_first_step_is_minus_lr(self):
        p = Parameter(np.zeros(1), dtype=np.float64)
        adam_step([p], [np.ones(1)], OptimizerState.zeros_like([p]), lr=2e-4)
        assert p.data[0] == pytest.approx(-2e-4, rel=1e-6)

    def test_zero_grads_leave_params(self):
        p = Parameter(np.arange(3.0))
        state = OptimizerState.zeros_like([p])
        adam_step([p], [None], state)
        adam_step([p], [np.zeros(3)], state)
        np.testing.assert_array_equal(p.data, np.arange(3.0))
        assert state.step == 2

    def test_moments_match_definition(self):
        p = Parameter(np.zeros(2), dtype=np.float64)
        state = OptimizerState.zeros_like([p])
        g1, g2 = np.array([1.0, -2.0]), np.array([0.5, 0.5])
        adam_step([p], [g1], state, beta1=0.5, beta2=0.999)
        adam_step([p], [g2], state, beta1=0.5, beta2=0.999)
        np.testing.assert_allclose(state.m[0], 0.5 * (0.5 * g1) + 0.5 * g2)
        np.testing.assert_allclose(state.v[0], 0.999 * (0.001 * g1 ** 2) + 0.001 * g2 ** 2)

    def test_class_uses_param_grads(self):
        p = Parameter(np.zeros(1), dtype=np.float64)
        opt = Adam([p])
        p.grad = np.array([-3.0])
        opt.step()
        assert p.data[0] == pytest.approx(2e-4, rel=1e-6)
        opt.zero_grad()
        assert p.grad is None


class TestTrainConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.epochs, c.lr, c.beta1, c.beta2) == (125, 2e-4, 0.5, 0.999)
        assert c.weights.lam == 100.0
        assert TrainConfig(mode="unpaired").weights.lam == 10.0

    @pytest.mark.parametrize("kw", [dict(mode="semi"), dict(epochs=0), dict(depth=-1),
                                    dict(lam=-0.5), dict(memory="x"), dict(config_version=9)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"epochs": 1, "learning_rate": 1.0})

    def test_dict_round_trip(self):
        c = small_config(lam=3.0)
        assert TrainConfig.from_dict(c.to_dict()) == c


class TestSteps:
    def test_satisfied_objective_gives_zero_grads(self, rng):
        model = tiny_model(depth=1)
        for d in (model.d_x, model.d_y):
            last = d.body[len(d.body) - 1]
            last.weight.data[:] = 0.0
            last.bias.data[:] = 1.0
        opt_g, opt_d = make_optimizers(model)
        before = [p.data.copy() for p in model.generator_parameters()]
        x, y = patches(rng)
        rec = train_step_paired(model, x, y, LossWeights(0.0), opt_g, opt_d, update_d=False)
        assert rec.total == 0.0 and rec.gan_g == 0.0
        assert all(not np.any(p.grad) for p in model.generator_parameters())
        for b, p in zip(before, model.generator_parameters()):
            np.testing.assert_array_equal(b, p.data)

    @pytest.mark.parametrize("step_fn", [train_step_paired, train_step_unpaired])
    def test_record_sums_to_total(self, step_fn, rng):
        model = tiny_model(depth=1)
        opt_g, opt_d = make_optimizers(model)
        rec = step_fn(model, *patches(rng), LossWeights(7.0), opt_g, opt_d)
        assert rec.gan_g + rec.lam * rec.l1_or_cyc == pytest.approx(rec.total, abs=1e-6)

    @pytest.mark.parametrize("step_fn", [train_step_paired, train_step_unpaired])
    def test_updates_both_players(self, step_fn, rng):
        model = tiny_model(depth=1)
        opt_g, opt_d = make_optimizers(model)
        g0 = [p.data.copy() for p in model.generator_parameters()]
        d0 = [p.data.copy() for p in model.discriminator_parameters()]
        step_fn(model, *patches(rng), LossWeights(10.0), opt_g, opt_d)
        assert any(not np.array_equal(a, p.data) for a, p in
                   zip(g0, model.generator_parameters()))
        assert any(not np.array_equal(a, p.data) for a, p in
                   zip(d0, model.discriminator_parameters()))
        assert opt_g.state.step == opt_d.state.step == 1

    def test_frozen_discriminators(self, rng):
        model = tiny_model(depth=1)
        opt_g, opt_d = make_optimizers(model)
        d0 = [p.data.copy() for p in model.discriminator_parameters()]
        train_step_paired(model, *patches(rng), LossWeights(), opt_g, opt_d, update_d=False)
        for a, p in zip(d0, model.discriminator_parameters()):
            np.testing.assert_array_equal(a, p.data)

    def test_nan_aborts_with_diagnostics(self, rng):
        model = tiny_model(depth=1)
        opt_g, opt_d = make_optimizers(model)
        x, y = patches(rng)
        y.data[0, 0, 0, 0, 0] = np.nan
        with np.errstate(invalid="ignore"), pytest.raises(NonFiniteLoss) as info:
            train_step_paired(model, x, y, LossWeights(), opt_g, opt_d, step=17)
        assert info.value.step == 17 and info.value.op_id

    @pytest.mark.parametrize("dtype,tol", [("float32", 1e-5), ("float64", 1e-10)])
    def test_memory_modes_step_alike(self, dtype, tol, rng):
        x, y = patches(rng, dtype=np.dtype(dtype))
        deltas, grads, params = {}, {}, {}
        for memory in ("reversible", "naive"):
            model = tiny_model(depth=2, dtype=dtype, memory=memory)
            randomize_params(model.core, np.random.default_rng(9), 0.1)
            start = [p.data.copy() for p in model.parameters()]
            opt_g, opt_d = make_optimizers(model)
            train_step_paired(model, x, y, LossWeights(), opt_g, opt_d)
            deltas[memory] = [p.data - s for p, s in zip(model.parameters(), start)]
            params[memory] = [p.data for p in model.parameters()]
            grads[memory] = [p.grad for p in model.generator_parameters()]
        assert scale_relative(grads["naive"], grads["reversible"]) < tol
        if dtype == "float64":
            assert scale_relative(deltas["naive"], deltas["reversible"]) < tol
        else:
            # an update of ~lr on a weight of ~0.1 is resolved only to one
            # 32-bit ulp of the weight, so compare at parameter scale
            assert scale_relative(params["naive"], params["reversible"]) < tol


def scale_relative(ref, other):
    err = max(np.max(np.abs(a - b)) for a, b in zip(ref, other))
    return err / max(np.max(np.abs(a)) for a in ref)


def read_log(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestFit:
    def test_epochs_steps_and_log(self, dataset, tmp_path):
        cfg = small_config(epochs=3, patches_per_volume=2)
        res = fit(cfg, dataset, tmp_path)
        rows = read_log(res.log_path)
        assert rows[0] == ["step", "epoch", "d_x_loss", "d_y_loss", "gan_g", "l1_or_cyc",
                           "total"]
        assert len(rows) - 1 == 3 * 2 * 2 == len(res.records)
        assert [int(r[1]) for r in rows[1:]] == [1] * 4 + [2] * 4 + [3] * 4
        assert sorted(p.name for p in tmp_path.glob("*.rg3d")) == [
            "epoch_0001.rg3d", "epoch_0002.rg3d", "epoch_0003.rg3d", "latest.rg3d"]

    def test_deterministic_logs(self, dataset, tmp_path):
        cfg = small_config(mode="unpaired")
        a = fit(cfg, dataset, tmp_path / "a").log_path.read_bytes()
        b = fit(cfg, dataset, tmp_path / "b").log_path.read_bytes()
        assert a == b

    @pytest.mark.parametrize("mode", ["paired", "unpaired"])
    def test_resume_equals_continuous(self, dataset, tmp_path, mode):
        # 5 epochs x 2 volumes = 10 steps; interrupt after epoch 2
        full = fit(small_config(mode=mode, epochs=5), dataset, tmp_path / "full")
        fit(small_config(mode=mode, epochs=2), dataset, tmp_path / "part")
        resumed = fit(small_config(mode=mode, epochs=5), dataset, tmp_path / "part",
                      resume=True)
        assert len(resumed.records) == 6
        assert full.log_path.read_bytes() == resumed.log_path.read_bytes()
        for (n, p), (_, q) in zip(full.model.named_parameters(),
                                  resumed.model.named_parameters()):
            assert p.data.tobytes() == q.data.tobytes(), n

    def test_empty_dataset(self, tmp_path):
        with pytest.raises(RevGANError):
            fit(small_config(), VolumeSet([], [], []), tmp_path)

    def test_super_resolution_pairs(self):
        rng = np.random.default_rng(0)
        vs = synthesize_pairs([make_phantom((18, 16, 16), rng)], "super-resolution")
        assert vs.targets[0].shape == (16, 16, 16)
        assert vs.sources[0].shape == (4, 8, 8)


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path, rng):
        model = tiny_model(task="super-resolution", depth=2)
        randomize_params(model, rng)
        path = checkpoint.save_model(tmp_path / "m.rg3d", model, {"epoch": 4})
        loaded, header, _ = checkpoint.load_model(path)
        assert header["state"] == {"epoch": 4}
        assert loaded.config == model.config
        for (n, p), (m, q) in zip(model.named_parameters(), loaded.named_parameters()):
            assert n == m and p.data.dtype == q.data.dtype
            assert p.data.tobytes() == q.data.tobytes()

    def test_header_magic_and_version(self, tmp_path):
        path = checkpoint.save_container(tmp_path / "c", {"a": 1}, [("x", np.ones(2))])
        raw = path.read_bytes()
        assert raw[:4] == b"RG3D" and int.from_bytes(raw[4:8], "little") == 1

    def test_mixed_blob_dtypes(self, tmp_path):
        blobs = [("f", np.arange(6, dtype=np.float32).reshape(2, 3)),
                 ("d", np.array(2.5)), ("i", np.arange(3, dtype=np.int64))]
        checkpoint.save_container(tmp_path / "c", {}, blobs)
        _, back = checkpoint.load_container(tmp_path / "c")
        for name, arr in blobs:
            assert back[name].dtype == arr.dtype and back[name].shape == arr.shape
            np.testing.assert_array_equal(back[name], arr)

    def test_truncated(self, tmp_path):
        path = checkpoint.save_container(tmp_path / "c", {}, [("x", np.ones(8))])
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError, match="truncated"):
            checkpoint.load_container(path)

    def test_trailing_bytes(self, tmp_path):
        path = checkpoint.save_container(tmp_path / "c", {}, [("x", np.ones(2))])
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(FormatError, match="trailing"):
            checkpoint.load_container(path)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c").write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(FormatError):
            checkpoint.load_container(tmp_path / "c")

    def test_shape_mismatch(self, tmp_path):
        model = tiny_model(depth=1)
        path = checkpoint.save_model(tmp_path / "m", model)
        header, blobs = checkpoint.load_container(path)
        header["model_config"]["core_channels"] = 10
        checkpoint.save_container(path, header, blobs.items())
        with pytest.raises(FormatError, match="shape"):
            checkpoint.load_model(path)
