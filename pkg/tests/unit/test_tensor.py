"""Unit tests for the autograd tensor core."""

import math
import os
import sys

# Add parent directory to path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "../..")))

import numpy as np
import pytest

from helpers.exceptions import DimensionError, DivideByZeroError, GradientError
from samiro import tensor as T
from samiro.gradcheck import numerical_gradient, relative_error
from samiro.tensor import Tensor


def leaf(values) -> Tensor:
    return Tensor(values, requires_grad=True)


@pytest.mark.unit
class TestConv2d:
    def test_identity_kernel_returns_input(self, rng):
        x = Tensor(rng.normal(size=(3, 5, 4)))
        kernel = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        out = T.conv2d(x, kernel)
        np.testing.assert_array_equal(out.data, x.data)

    def test_all_ones_window_sums_to_nine(self):
        out = T.conv2d(T.ones((1, 3, 3)), T.ones((1, 1, 3, 3)))
        assert out.shape == (1, 1, 1)
        assert out.item() == 9.0

    def test_padding_keeps_extent_and_stride_halves(self, rng):
        x = Tensor(rng.normal(size=(2, 8, 6)))
        kernel = Tensor(rng.normal(size=(4, 2, 3, 3)))
        assert T.conv2d(x, kernel, padding=1).shape == (4, 8, 6)
        assert T.conv2d(x, kernel, stride=2, padding=1).shape == (4, 4, 3)

    def test_matches_naive_loop(self, rng, float64):
        x = Tensor(rng.normal(size=(2, 5, 5)))
        kernel = Tensor(rng.normal(size=(3, 2, 3, 3)))
        bias = Tensor(rng.normal(size=3))
        out = T.conv2d(x, kernel, bias, stride=2, padding=1).data
        padded = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
        expected = np.zeros((3, 3, 3))
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    window = padded[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                    expected[o, i, j] = np.sum(window * kernel.data[o]) + bias.data[o]
        np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)

    def test_gradients_match_finite_differences(self, rng, float64):
        x = leaf(rng.normal(size=(3, 5, 5)))
        kernel = leaf(rng.normal(size=(2, 3, 5, 5)))
        bias = leaf(rng.normal(size=2))
        weights = Tensor(rng.normal(size=(2, 3, 3)))

        def loss_fn():
            return T.sum_all(T.conv2d(x, kernel, bias, padding=1) * weights)

        T.backward(loss_fn())
        for param in (x, kernel, bias):
            assert relative_error(param.grad, numerical_gradient(loss_fn, param)) < 1e-4

    def test_channel_mismatch_names_axes(self):
        with pytest.raises(DimensionError, match="C_in=3"):
            T.conv2d(T.zeros((2, 4, 4)), T.zeros((1, 3, 3, 3)))

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError):
            T.conv2d(T.zeros((1, 4, 4)), T.zeros((1, 1, 2, 2)))

    def test_bias_shape_checked(self):
        with pytest.raises(DimensionError, match="bias"):
            T.conv2d(T.zeros((1, 4, 4)), T.zeros((2, 1, 3, 3)), bias=T.zeros((3,)))


@pytest.mark.unit
class TestPoolOverChannels:
    def test_single_channel_is_identity(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 3)))
        for mode in ("avg", "max"):
            np.testing.assert_array_equal(T.pool_over_channels(x, mode).data, x.data)

    def test_two_channel_values(self):
        x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1))
        assert T.pool_over_channels(x, "avg").item() == 2.0
        assert T.pool_over_channels(x, "max").item() == 3.0

    def test_max_routes_gradient_to_first_argmax(self):
        x = leaf(np.array([2.0, 2.0, 1.0]).reshape(3, 1, 1))
        T.backward(T.sum_all(T.pool_over_channels(x, "max")))
        np.testing.assert_array_equal(x.grad.reshape(-1), [1.0, 0.0, 0.0])

    def test_gradients_match_finite_differences(self, rng, float64):
        x = leaf(rng.normal(size=(8, 4, 4)))
        weights = Tensor(rng.normal(size=(1, 4, 4)))
        for mode in ("avg", "max"):
            x.zero_grad()

            def loss_fn(mode=mode):
                return T.sum_all(T.pool_over_channels(x, mode) * weights)

            T.backward(loss_fn())
            assert relative_error(x.grad, numerical_gradient(loss_fn, x)) < 1e-4

    def test_rejects_non_chw(self):
        with pytest.raises(DimensionError):
            T.pool_over_channels(T.zeros((4, 4)), "avg")


@pytest.mark.unit
class TestElementwise:
    def test_multiplicative_identity(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 3)))
        np.testing.assert_array_equal((a * T.ones((2, 3, 3))).data, a.data)

    def test_channel_vector_scales_slices(self):
        maps = T.ones((3, 2, 2))
        scale = Tensor(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1))
        out = T.elementwise("mul", scale, maps).data
        for channel, value in enumerate((1.0, 2.0, 3.0)):
            assert np.all(out[channel] == value)

    def test_broadcast_gradient_is_per_channel_sum(self, rng, float64):
        scale = leaf(rng.normal(size=(3, 1, 1)))
        maps = Tensor(rng.normal(size=(3, 4, 5)))
        upstream = rng.normal(size=(3, 4, 5))
        T.backward(T.sum_all(T.elementwise("mul", scale, maps) * Tensor(upstream)))
        expected = (upstream * maps.data).sum(axis=(1, 2)).reshape(3, 1, 1)
        np.testing.assert_allclose(scale.grad, expected, rtol=1e-12)

    def test_broadcast_matches_dense_expansion(self, rng, float64):
        values = rng.normal(size=(2, 1, 1))
        maps = rng.normal(size=(2, 3, 3))
        compact = leaf(values)
        dense = leaf(np.broadcast_to(values, (2, 3, 3)).copy())
        T.backward(T.sum_all(T.elementwise("mul", compact, Tensor(maps))))
        T.backward(T.sum_all(T.elementwise("mul", dense, Tensor(maps))))
        np.testing.assert_allclose(compact.grad, dense.grad.sum(axis=(1, 2), keepdims=True), rtol=1e-12)

    def test_non_broadcastable_shapes(self):
        with pytest.raises(DimensionError):
            T.elementwise("add", T.zeros((2, 3)), T.zeros((3, 2)))

    def test_division_by_exact_zero(self):
        with pytest.raises(DivideByZeroError):
            T.elementwise("div", T.ones((2,)), Tensor([1.0, 0.0]))

    def test_scale_rejects_tensor(self):
        with pytest.raises(DimensionError):
            T.elementwise("scale", T.ones((2,)), T.ones((2,)))

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            T.elementwise("pow", T.ones((2,)), 2.0)


@pytest.mark.unit
class TestActivations:
    def test_sigmoid_of_zero(self):
        assert T.sigmoid(T.zeros((1,))).item() == 0.5

    def test_sigmoid_is_stable_for_large_inputs(self):
        out = T.sigmoid(Tensor([-1000.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(0.0, abs=1e-30)
        assert out[1] == pytest.approx(1.0)

    def test_relu_of_log_abs_one_is_zero(self):
        assert T.relu(T.log_abs(T.ones((1,)))).item() == 0.0

    def test_log_abs_of_minus_e(self, float64):
        assert T.log_abs(Tensor([-math.e])).item() == pytest.approx(1.0, abs=1e-15)

    def test_log_abs_floor(self, float64):
        out = T.log_abs(Tensor([0.0]))
        assert out.item() == pytest.approx(math.log(1e-8))

    def test_relu_subgradient_zero_at_kink(self):
        x = leaf([0.0, 2.0, -1.0])
        T.backward(T.sum_all(T.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_magnitude_gradient_is_sign(self, float64):
        x = leaf([-2.0, 3.0, 1e-12])
        T.backward(T.sum_all(T.magnitude(x, 1e-8)))
        np.testing.assert_array_equal(x.grad, [-1.0, 1.0, 0.0])


@pytest.mark.unit
class TestReduce:
    def test_mean_of_ones(self):
        assert T.mean(T.ones((2, 3, 4))).item() == 1.0

    def test_sq_l2_norm_pythagorean(self):
        assert T.reduce("sq_l2_norm", Tensor([3.0, 4.0])).item() == 25.0

    def test_per_channel_sq_l2_norm_matches_loop(self, rng, float64):
        x = rng.normal(size=(3, 4, 5))
        out = T.reduce("sq_l2_norm", Tensor(x), axes=(1, 2)).data
        for channel in range(3):
            expected = 0.0
            for value in x[channel].reshape(-1):
                expected += value * value
            assert out[channel] == pytest.approx(expected, rel=1e-12)

    def test_keepdims_shape(self):
        assert T.reduce("sum", T.ones((2, 3, 4)), axes=0, keepdims=True).shape == (1, 3, 4)

    def test_invalid_axis(self):
        with pytest.raises(DimensionError):
            T.reduce("sum", T.ones((2, 3)), axes=2)

    def test_repeated_axis(self):
        with pytest.raises(DimensionError):
            T.reduce("sum", T.ones((2, 3)), axes=(0, -2))


@pytest.mark.unit
class TestChannelPlumbing:
    def test_concat_shape(self):
        assert T.concat_channels(T.zeros((1, 2, 2)), T.ones((1, 2, 2))).shape == (2, 2, 2)

    def test_concat_then_slice_round_trip(self, rng):
        a, b = Tensor(rng.normal(size=(2, 3, 3))), Tensor(rng.normal(size=(3, 3, 3)))
        joined = T.concat_channels(a, b)
        np.testing.assert_array_equal(T.slice_channels(joined, 0, 2).data, a.data)
        np.testing.assert_array_equal(T.slice_channels(joined, 2, 5).data, b.data)

    def test_concat_routes_gradients(self, rng):
        a, b = leaf(rng.normal(size=(1, 2, 2))), leaf(rng.normal(size=(2, 2, 2)))
        weights = np.arange(12, dtype=np.float64).reshape(3, 2, 2)
        T.backward(T.sum_all(T.concat_channels(a, b) * Tensor(weights)))
        np.testing.assert_array_equal(a.grad, weights[:1])
        np.testing.assert_array_equal(b.grad, weights[1:])

    def test_concat_spatial_mismatch(self):
        with pytest.raises(DimensionError):
            T.concat_channels(T.zeros((1, 2, 2)), T.zeros((1, 2, 3)))

    def test_avg_pool_and_upsample(self):
        x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 4, 4))
        pooled = T.avg_pool2d(x, 2)
        np.testing.assert_array_equal(pooled.data[0], [[2.5, 4.5], [10.5, 12.5]])
        assert T.upsample_nearest(pooled, 2).shape == (1, 4, 4)

    def test_avg_pool_indivisible(self):
        with pytest.raises(DimensionError):
            T.avg_pool2d(T.zeros((1, 3, 4)), 2)


@pytest.mark.unit
class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        T.backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_mean_of_squares(self, rng, float64):
        values = rng.normal(size=(4, 5))
        x = leaf(values)
        T.backward(T.mean(x * x))
        np.testing.assert_allclose(x.grad, 2 * values / values.size, rtol=1e-12)

    def test_repeated_calls_accumulate(self):
        x = leaf([1.0, 2.0])
        loss = T.sum_all(x)
        T.backward(loss)
        T.backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])
        x.zero_grad()
        assert x.grad is None

    def test_shared_subgraph_visited_once(self):
        x = leaf([3.0])
        y = x * x
        T.backward(T.sum_all(y + y))
        assert x.grad[0] == 12.0

    def test_non_scalar_loss(self):
        with pytest.raises(GradientError):
            T.backward(leaf([1.0, 2.0]) * 2.0)

    def test_loss_without_leaves(self):
        with pytest.raises(GradientError):
            T.backward(T.sum_all(T.ones((2,))))

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with T.no_grad():
            y = x * 2.0
        assert y.node is None
        assert not y.requires_grad


@pytest.mark.unit
class TestPrecision:
    def test_default_is_32_bit(self):
        assert T.ones((1,)).dtype == np.float32

    def test_precision_context(self):
        with T.precision("float64"):
            assert T.ones((1,)).dtype == np.float64
        assert T.ones((1,)).dtype == np.float32

    def test_evaluation_is_deterministic(self, rng):
        x = Tensor(rng.normal(size=(2, 6, 6)))
        kernel = Tensor(rng.normal(size=(3, 2, 3, 3)))
        first = T.sigmoid(T.conv2d(x, kernel, padding=1)).data
        second = T.sigmoid(T.conv2d(x, kernel, padding=1)).data
        assert first.tobytes() == second.tobytes()
