"""Reversible core: exact inversion, memory-free gradients and activation accounting."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from revgan3d import tensor as T
from revgan3d.errors import ConfigError, ShapeError
from revgan3d.gradcheck import finite_diff_check
from revgan3d.revcore import RevBlock, RevSequence, rev_backward, rev_forward, rev_inverse
from revgan3d.tensor import Tape, Tensor, backward, no_grad

from conftest import make_core

SHAPE = (1, 4, 4, 4, 4)


def gradients(core, x, memory, inverse=False, proj=None):
    """(input grad, param grads) of sum(proj * core(x)) recorded in `memory` mode."""
    core.zero_grad()
    xt = Tensor(x.copy(), requires_grad=True)
    proj = np.ones(x.shape) if proj is None else proj
    with Tape():
        y = (rev_inverse if inverse else rev_forward)(xt, core, memory)
        loss = T.sum_(T.mul(y, Tensor(proj)))
    backward(loss)
    return [xt.grad] + [p.grad for p in core.parameters()]


def scale_relative(a, b):
    num = max(np.max(np.abs(u - v)) for u, v in zip(a, b))
    den = max(np.max(np.abs(u)) for u in a)
    return num / den


class TestInversion:
    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 3))
    def test_round_trip_float64(self, seed, depth):
        core = make_core(4, depth, seed=seed % 1000)
        x = np.random.default_rng(seed).normal(size=SHAPE)
        with no_grad():
            back = rev_inverse(rev_forward(Tensor(x), core), core).data
        assert np.max(np.abs(back - x)) < 1e-11

    def test_inverse_then_forward(self, rng):
        core = make_core(4, 3)
        y = rng.normal(size=SHAPE)
        with no_grad():
            again = rev_forward(rev_inverse(Tensor(y), core), core).data
        assert np.max(np.abs(again - y)) < 1e-11

    def test_zero_init_is_identity(self, rng):
        core = RevSequence(4, 2, rng=rng, dtype=np.float64)
        x = rng.normal(size=SHAPE)
        with no_grad():
            np.testing.assert_array_equal(rev_forward(Tensor(x), core).data, x)

    def test_depth_zero_passes_through(self, rng):
        core = RevSequence(3, 0, rng=rng)
        x = Tensor(rng.normal(size=(1, 3, 2, 2, 2)))
        assert rev_forward(x, core) is x and rev_inverse(x, core) is x

    def test_modes_agree_forward(self, rng):
        core = make_core(4, 2)
        x = Tensor(rng.normal(size=SHAPE), requires_grad=True)
        with Tape():
            a = rev_forward(x, core, "reversible").data
        with Tape():
            b = rev_forward(x, core, "naive").data
        np.testing.assert_array_equal(a, b)


class TestErrors:
    def test_odd_channels(self, rng):
        with pytest.raises(ConfigError):
            RevBlock(3, rng=rng)
        with pytest.raises(ConfigError):
            RevSequence(5, 2, rng=rng)

    def test_channel_mismatch(self, rng):
        core = RevSequence(4, 1, rng=rng)
        with pytest.raises(ShapeError):
            rev_forward(Tensor(np.zeros((1, 6, 2, 2, 2))), core)

    def test_unknown_memory_mode(self, rng):
        core = RevSequence(4, 1, rng=rng)
        with pytest.raises(ConfigError):
            rev_forward(Tensor(np.zeros(SHAPE)), core, "lazy")

    def test_backward_shape_mismatch(self, rng):
        core = RevSequence(4, 1, rng=rng)
        with pytest.raises(ShapeError):
            rev_backward(np.zeros(SHAPE), np.zeros((1, 4, 2, 2, 2)), core)


class TestGradients:
    @pytest.mark.parametrize("depth", [1, 2, 3])
    @pytest.mark.parametrize("inverse", [False, True])
    def test_reversible_matches_stored(self, depth, inverse, rng):
        core = make_core(4, depth, seed=depth)
        x = rng.normal(size=SHAPE)
        proj = rng.normal(size=SHAPE)
        rev = gradients(core, x, "reversible", inverse, proj)
        naive = gradients(core, x, "naive", inverse, proj)
        assert scale_relative(naive, rev) < 1e-10

    @pytest.mark.parametrize("inverse", [False, True])
    def test_finite_differences(self, inverse, rng):
        core = make_core(2, 2, seed=7)
        x = Tensor(rng.normal(size=(1, 2, 3, 3, 2)))
        proj = Tensor(rng.normal(size=x.shape))
        op = rev_inverse if inverse else rev_forward
        f = lambda xx, *ps: T.sum_(T.mul(op(xx, core), proj))
        assert finite_diff_check(f, [x] + core.parameters()) < 1e-6

    def test_direct_call_matches_tape(self, rng):
        core = make_core(4, 2)
        x = rng.normal(size=SHAPE)
        g = rng.normal(size=SHAPE)
        with no_grad():
            y = rev_forward(Tensor(x), core).data
        gx, pgrads = rev_backward(g, y, core)
        ref = gradients(core, x, "naive", proj=g)
        assert scale_relative(ref, [gx] + pgrads) < 1e-10

    def test_zero_output_grad(self, rng):
        core = make_core(4, 2)
        with no_grad():
            y = rev_forward(Tensor(rng.normal(size=SHAPE)), core).data
        gx, pgrads = rev_backward(np.zeros(SHAPE), y, core)
        assert not gx.any() and not any(p.any() for p in pgrads)

    def test_existing_grads_untouched(self, rng):
        core = make_core(4, 1)
        marker = [np.full(p.shape, 5.0) for p in core.parameters()]
        for p, m in zip(core.parameters(), marker):
            p.grad = m
        with no_grad():
            y = rev_forward(Tensor(rng.normal(size=SHAPE)), core).data
        rev_backward(np.ones(SHAPE), y, core)
        assert all(p.grad is m for p, m in zip(core.parameters(), marker))


class TestMemory:
    @staticmethod
    def stored(core, memory, rng):
        x = Tensor(rng.normal(size=SHAPE), requires_grad=True)
        with Tape() as tape:
            # a trailing consumer that saves its input, like the decoder conv
            loss = T.sum_(T.square(rev_forward(x, core, memory)))
        nbytes = tape.ledger.stored_bytes
        backward(loss)
        return nbytes

    def test_reversible_constant_in_depth(self):
        totals = {d: self.stored(make_core(4, d), "reversible", np.random.default_rng(0))
                  for d in (0, 1, 2, 4, 8)}
        assert len(set(totals.values())) == 1

    def test_naive_grows_with_depth(self):
        totals = [self.stored(make_core(4, d), "naive", np.random.default_rng(0))
                  for d in (1, 2, 4, 8)]
        assert all(a < b for a, b in zip(totals, totals[1:]))

    def test_compute_trade(self, rng):
        """Reversible backward runs every subnet once more than stored mode."""
        depth = 3
        counts = {}
        for memory in ("reversible", "naive"):
            core = make_core(4, depth)
            x = Tensor(rng.normal(size=SHAPE), requires_grad=True)
            with Tape():
                loss = T.sum_(rev_forward(x, core, memory))
            backward(loss)
            counts[memory] = core.subnet_evals
        assert counts["naive"] == 2 * depth
        assert counts["reversible"] == counts["naive"] + 2 * depth

    def test_subnet_outputs_are_recomputable(self, rng):
        core = make_core(4, 2)
        x = Tensor(rng.normal(size=SHAPE), requires_grad=True)
        with Tape() as tape:
            rev_forward(x, core)
        policies = tape.ledger.bytes_by_policy()
        assert tape.ledger.count(T.Retain.RECOMPUTABLE) > 0
        assert policies[T.Retain.RECOMPUTABLE] == 0
        assert len(tape) == 1
