"""Tape, operation, and gradient tests for the autodiff core."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mv4d import autodiff as ad
from mv4d.autodiff import Tape, Tensor
from mv4d.gradcheck import OP_FACTORIES, check_op, gradcheck


def scalar_grad(fn, x0):
    """d fn/dx at a scalar point, via the tape."""
    x = Tensor(np.asarray(x0, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        y = fn(x)
    return float(tape.grad(tape.gradients(y), x))


class TestForwardValues:
    def test_sigmoid_of_zero_is_half(self):
        assert ad.sigmoid(Tensor(0.0)).item() == 0.5

    def test_reshape_preserves_row_major_order(self):
        x = np.arange(24.0).reshape(2, 3, 4)
        out = ad.reshape(Tensor(x), (6, 4))
        np.testing.assert_array_equal(out.data, x.reshape(6, 4))

    def test_reshape_roundtrip_is_identity(self):
        x = np.arange(24.0).reshape(2, 3, 4)
        back = ad.reshape(ad.reshape(Tensor(x), (6, 4)), (2, 3, 4))
        np.testing.assert_array_equal(back.data, x)

    def test_bilinear_constant_field(self):
        grid = Tensor(np.full((1, 4, 5), 7.0))
        coords = Tensor(np.array([[1.3, 2.7], [0.5, 0.5], [3.9, 2.1]]))
        out = ad.bilinear_sample_2d(grid, coords)
        np.testing.assert_allclose(out.data, 7.0)

    def test_softmax_rows_sum_to_one(self):
        x = Tensor(np.random.default_rng(0).standard_normal((4, 6)))
        out = ad.softmax(x, axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_clamp_min_floor(self):
        out = ad.clamp_min(Tensor(np.array([-2.0, 0.5, 3.0])), 1.0)
        np.testing.assert_array_equal(out.data, [1.0, 1.0, 3.0])


class TestBackward:
    def test_square_gradient_at_three(self):
        assert scalar_grad(lambda x: ad.mul(x, x), 3.0) == pytest.approx(6.0)

    def test_sigmoid_sharpness_gradient(self):
        # d/ds sigmoid(a*s) at s=0 is a * 0.5 * 0.5
        g = scalar_grad(lambda s: ad.sigmoid(ad.mul(s, 2.0)), 0.0)
        assert g == pytest.approx(0.5)

    def test_trilinear_grid_gradient_matches_fd(self):
        rng = np.random.default_rng(3)
        grid = Tensor(rng.standard_normal((2, 3, 4, 5)), requires_grad=True)
        coords = Tensor(np.array([[1.0, 2.0, 1.0], [2.4, 1.6, 0.7]]))
        probe = Tensor(rng.standard_normal((2, 2)))

        def fn(g):
            return ad.reduce_sum(ad.mul(ad.trilinear_sample_3d(g, coords), probe))

        assert gradcheck(fn, [grid]) < 1e-4

    def test_two_losses_accumulate_additively(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            a = ad.reduce_sum(ad.mul(x, x))
            b = ad.reduce_sum(ad.mul(x, 3.0))
        ga = tape.grad(tape.gradients(a), x)
        gb = tape.grad(tape.gradients(b), x)
        with Tape() as tape2:
            total = ad.add(ad.reduce_sum(ad.mul(x, x)), ad.reduce_sum(ad.mul(x, 3.0)))
        gt = tape2.grad(tape2.gradients(total), x)
        np.testing.assert_allclose(gt, ga + gb, atol=1e-12)

    def test_unused_node_gradient_is_zero(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        y = Tensor(np.array([2.0]), requires_grad=True)
        with Tape() as tape:
            loss = ad.reduce_sum(ad.mul(x, x))
        np.testing.assert_array_equal(tape.grad(tape.gradients(loss), y), [0.0])

    def test_loss_must_be_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ad.mul(x, 2.0)
        with pytest.raises(ValueError, match="scalar"):
            tape.gradients(y)

    def test_broadcast_gradient_unbroadcasts(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        with Tape() as tape:
            loss = ad.reduce_sum(ad.add(a, b))
        gb = tape.grad(tape.gradients(loss), b)
        np.testing.assert_array_equal(gb, np.full(4, 3.0))


class TestExactness:
    """reshape/slice/concat must be bit-exact both ways."""

    def test_slice_concat_roundtrip_bits(self):
        x = np.random.default_rng(1).standard_normal((4, 6))
        t = Tensor(x)
        parts = [ad.slice_(t, (slice(None), slice(i, i + 2))) for i in (0, 2, 4)]
        back = ad.concat(parts, axis=1)
        assert back.data.tobytes() == x.tobytes()

    def test_reshape_roundtrip_bits(self):
        x = np.random.default_rng(2).standard_normal((3, 8))
        back = ad.reshape(ad.reshape(Tensor(x), (6, 4)), (3, 8))
        assert back.data.tobytes() == x.tobytes()


class TestRecordingControl:
    def test_no_grad_suppresses_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            with ad.no_grad():
                y = ad.mul(x, 2.0)
        assert len(tape) == 0
        assert not y.requires_grad

    def test_ops_outside_tape_do_not_record(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = ad.mul(x, 2.0)
        assert not y.requires_grad

    def test_constant_inputs_do_not_record(self):
        with Tape() as tape:
            ad.mul(Tensor(np.ones(3)), Tensor(np.ones(3)))
        assert len(tape) == 0


class TestFiniteChecks:
    def test_non_finite_result_raises(self):
        with np.errstate(divide="ignore"):
            with pytest.raises(ad.NonFiniteError):
                ad.reciprocal(Tensor(np.array([0.0])))

    def test_checks_can_be_disabled(self):
        ad.set_finite_checks(False)
        try:
            with np.errstate(divide="ignore"):
                out = ad.reciprocal(Tensor(np.array([0.0])))
            assert np.isinf(out.data).all()
        finally:
            ad.set_finite_checks(True)


class TestGradcheckHarness:
    def test_perturbation_range_enforced(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ValueError, match="perturbation"):
            gradcheck(lambda t: ad.reduce_sum(t), [x], eps=1e-2)

    def test_double_precision_required(self):
        x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(ValueError, match="double"):
            gradcheck(lambda t: ad.reduce_sum(t), [x])

    def test_matmul_instance_tight(self):
        rng = np.random.default_rng(11)
        assert check_op("matmul", rng, instances=1) < 1e-5

    def test_softmax_instance_tight(self):
        rng = np.random.default_rng(12)
        assert check_op("softmax", rng, instances=1) < 1e-5

    def test_conv2d_instance_tight(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.standard_normal((1, 8, 8)), requires_grad=True)
        w = Tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
        probe = Tensor(rng.standard_normal((1, 6, 6)))

        def fn(xx, ww):
            return ad.reduce_sum(ad.mul(ad.conv2d(xx, ww), probe))

        assert gradcheck(fn, [x, w]) < 1e-5


@pytest.mark.parametrize("name", sorted(OP_FACTORIES))
def test_gradcheck_every_op(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    assert check_op(name, rng, instances=10) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_sigmoid_symmetry(values):
    x = np.asarray(values)
    s = ad.sigmoid(Tensor(x)).data + ad.sigmoid(Tensor(-x)).data
    np.testing.assert_allclose(s, 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matmul_matches_numpy(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, a @ b, atol=1e-12)
