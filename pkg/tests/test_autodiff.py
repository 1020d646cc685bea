import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import dyntask.autodiff as ad
from dyntask import gradcheck
from dyntask.errors import (ConfigError, ContractError, DomainError,
                            NumericsError, ShapeError)
from oracles import central_difference, max_rel_err


def leafs(*arrays):
    tape = ad.Tape()
    return tape, [tape.leaf(a) for a in arrays]


class TestMatmul:
    def test_identity(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        tape, (i, t) = leafs(np.eye(2), x)
        np.testing.assert_array_equal(ad.matmul(i, t).data, x)

    def test_hand_product(self):
        tape, (a, b) = leafs([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).data, [[3.0], [7.0]])

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(0)
        a0 = rng.standard_normal((3, 4))
        b0 = rng.standard_normal((4, 2))

        def f(a):
            return float((a @ b0).sum())

        tape, (a, b) = leafs(a0, b0)
        grads = ad.backward(ad.reduce_sum(ad.matmul(a, b)))
        assert max_rel_err(grads.of(a), central_difference(f, a0)) < 1e-6

    def test_shape_mismatch_reports_both_shapes(self):
        tape, (a, b) = leafs(np.zeros((2, 3)), np.zeros((2, 3)))
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(a, b)


class TestConv2d:
    def test_one_by_one_identity(self):
        rng = np.random.default_rng(1)
        x0 = rng.standard_normal((2, 1, 4, 4))
        tape, (x, k) = leafs(x0, np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(ad.conv2d(x, k).data, x0)

    def test_all_ones_count(self):
        tape, (x, k) = leafs(np.ones((1, 1, 5, 5)), np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, k, stride=1, padding=0)
        assert out.shape == (1, 1, 3, 3)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 9.0))

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(2)
        x0 = rng.standard_normal((2, 2, 5, 5))
        k0 = rng.standard_normal((3, 2, 3, 3))

        def forward(x_arr, k_arr):
            t, (x, k) = leafs(x_arr, k_arr)
            return ad.conv2d(x, k, stride=2, padding=1)

        tape, (x, k) = leafs(x0, k0)
        grads = ad.backward(ad.reduce_sum(ad.conv2d(x, k, stride=2, padding=1)))
        gx = central_difference(lambda a: float(forward(a, k0).data.sum()), x0)
        gk = central_difference(lambda a: float(forward(x0, a).data.sum()), k0)
        assert max_rel_err(grads.of(x), gx) < 1e-5
        assert max_rel_err(grads.of(k), gk) < 1e-5

    def test_invalid_stride_and_padding(self):
        tape, (x, k) = leafs(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)))
        with pytest.raises(ConfigError):
            ad.conv2d(x, k, stride=0)
        with pytest.raises(ConfigError):
            ad.conv2d(x, k, padding=-1)

    def test_kernel_larger_than_padded_input(self):
        tape, (x, k) = leafs(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 5, 5)))
        with pytest.raises(ShapeError):
            ad.conv2d(x, k)


class TestElementwise:
    def test_relu_values(self):
        tape, (x,) = leafs([-1.0, 0.0, 2.0])
        np.testing.assert_array_equal(ad.relu(x).data, [0.0, 0.0, 2.0])

    def test_reduce_sum_of_zeros_and_its_gradient(self):
        tape, (x,) = leafs(np.zeros((2, 3)))
        s = ad.reduce_sum(x)
        assert s.item() == 0.0
        np.testing.assert_array_equal(ad.backward(s).of(x), np.ones((2, 3)))

    def test_exp_log_round_trip(self):
        rng = np.random.default_rng(3)
        x0 = rng.uniform(0.1, 5.0, (4, 4))
        tape, (x,) = leafs(x0)
        back = ad.exp(ad.log(x))
        assert np.max(np.abs(back.data - x0)) < 1e-12

    def test_log_rejects_nonpositive(self):
        tape, (x,) = leafs([1.0, 0.0])
        with pytest.raises(DomainError):
            ad.log(x)

    def test_sqrt_rejects_nonpositive(self):
        tape, (x,) = leafs([-1.0])
        with pytest.raises(DomainError):
            ad.sqrt(x)

    def test_nonfinite_result_raises(self):
        tape, (x,) = leafs([1000.0])
        with pytest.raises(NumericsError):
            ad.exp(x)

    def test_nonfinite_leaf_raises(self):
        tape = ad.Tape()
        with pytest.raises(NumericsError):
            tape.leaf([np.nan])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_add_mul_shapes_and_linearity(self, seed):
        rng = np.random.default_rng(seed)
        a0 = rng.standard_normal((2, 3))
        b0 = rng.standard_normal((2, 3))
        tape, (a, b) = leafs(a0, b0)
        s = ad.reduce_sum(ad.add(ad.mul(a, b), ad.mul(b, a)))
        grads = ad.backward(s)
        np.testing.assert_allclose(grads.of(a), 2 * b0, atol=1e-12)

    def test_incompatible_broadcast_rejected(self):
        tape, (a, b) = leafs(np.zeros((2, 3)), np.zeros((3, 2)))
        with pytest.raises(ShapeError):
            ad.add(a, b)


class TestBackward:
    def test_leaf_loss_gradient_is_one(self):
        tape, (x,) = leafs(np.asarray(2.5))
        assert ad.backward(x).of(x) == 1.0

    def test_sum_of_squares(self):
        tape, (x,) = leafs([1.0, 2.0])
        loss = ad.reduce_sum(ad.square(x))
        np.testing.assert_array_equal(ad.backward(loss).of(x), [2.0, 4.0])

    def test_nonscalar_loss_rejected(self):
        tape, (x,) = leafs([1.0, 2.0])
        with pytest.raises(ContractError):
            ad.backward(x)

    def test_unreachable_node_gets_zero(self):
        tape, (x, y) = leafs([1.0, 2.0], [3.0])
        loss = ad.reduce_sum(ad.square(x))
        np.testing.assert_array_equal(ad.backward(loss).of(y), [0.0])

    def test_sum_of_losses_equals_sum_of_backwards(self):
        rng = np.random.default_rng(4)
        x0 = rng.standard_normal((3, 3))

        def build():
            tape = ad.Tape()
            x = tape.leaf(x0)
            l1 = ad.reduce_sum(ad.square(x))
            l2 = ad.reduce_mean(ad.exp(x))
            return tape, x, l1, l2

        _, x, l1, l2 = build()
        combined = ad.backward(ad.add(l1, l2)).of(x)
        _, x1, a, _ = build()
        _, x2, _, b = build()
        separate = ad.backward(a).of(x1) + ad.backward(b).of(x2)
        np.testing.assert_array_equal(combined, separate)

    def test_rerun_is_bit_identical(self):
        rng = np.random.default_rng(5)
        x0 = rng.standard_normal((4, 4))
        k0 = rng.standard_normal((2, 1, 3, 3))

        def run():
            tape, (x, k) = leafs(x0.reshape(1, 1, 4, 4), k0)
            out = ad.maxpool2d(ad.relu(ad.conv2d(x, k, padding=1)))
            loss = ad.reduce_sum(ad.square(out))
            return loss.item(), ad.backward(loss).of(x)

        v1, g1 = run()
        v2, g2 = run()
        assert v1 == v2
        np.testing.assert_array_equal(g1, g2)


class TestFiniteDifferenceSweep:
    def test_every_registered_op_has_a_case(self):
        for op in ad.REGISTERED_OPS:
            assert gradcheck.op_cases(op, seed=0)

    @pytest.mark.parametrize("op", ad.REGISTERED_OPS)
    def test_registered_op_over_ten_seeds(self, op):
        for res in gradcheck.check_op(op, seeds=range(10)):
            assert res.passed, (
                f"{res.name} seed={res.seed} max_rel_err={res.max_rel_err:.3e}")
