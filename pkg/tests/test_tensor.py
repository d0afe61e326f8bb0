import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgrnet.errors import ConfigurationError, ContractError, ShapeError
from hgrnet.tensor import (
    RunningStats,
    Tensor,
    Variable,
    add,
    backward,
    batch_norm,
    bilinear_upsample,
    concat_channels,
    conv2d,
    conv_geometry,
    dense,
    dropout,
    global_avg_pool,
    interpolation_matrix,
    max_pool2d,
    no_grad,
    relu,
    set_num_threads,
    sigmoid,
    softmax,
    sum_all,
)


def direct_conv(x, k, stride=1, dilation=1):
    """Brute-force valid convolution used as an oracle."""
    n, h, w, _ = x.shape
    kh, kw, _, c_out = k.shape
    extent_h = dilation * (kh - 1) + 1
    extent_w = dilation * (kw - 1) + 1
    oh = (h - extent_h) // stride + 1
    ow = (w - extent_w) // stride + 1
    out = np.zeros((n, oh, ow, c_out))
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                for di in range(kh):
                    for dj in range(kw):
                        pixel = x[b, i * stride + di * dilation, j * stride + dj * dilation]
                        out[b, i, j] += pixel @ k[di, dj]
    return out


class TestConv2d:
    def test_same_padding_keeps_size(self, rng):
        x = Tensor(rng.normal(size=(1, 320, 320, 3)))
        k = Variable(rng.normal(size=(3, 3, 3, 16)))
        assert conv2d(x, k, padding="same").shape == (1, 320, 320, 16)

    def test_valid_padding_trims_border(self, rng):
        x = Tensor(rng.normal(size=(1, 320, 320, 3)))
        k = Variable(rng.normal(size=(3, 3, 3, 16)))
        assert conv2d(x, k, padding="valid").shape == (1, 318, 318, 16)

    def test_ones_sum_to_nine(self):
        out = conv2d(Tensor(np.ones((1, 3, 3, 1))), Variable(np.ones((3, 3, 1, 1))), padding="valid")
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    def test_dilation_18_covers_37_pixels(self, rng):
        x = rng.normal(size=(1, 37, 37, 1))
        k = rng.normal(size=(3, 3, 1, 1))
        out = conv2d(Tensor(x, dtype=np.float64), Variable(k, dtype=np.float64), dilation=18, padding="valid")
        assert out.shape == (1, 1, 1, 1)
        np.testing.assert_allclose(out.data, direct_conv(x, k, dilation=18), rtol=1e-10)

    @pytest.mark.parametrize("stride,dilation", [(1, 1), (2, 1), (1, 2), (2, 3)])
    def test_matches_direct_convolution(self, rng, stride, dilation):
        x = rng.normal(size=(2, 11, 10, 3))
        k = rng.normal(size=(3, 3, 3, 4))
        b = rng.normal(size=4)
        out = conv2d(Tensor(x, dtype=np.float64), Variable(k, dtype=np.float64), Variable(b, dtype=np.float64),
                     stride=stride, dilation=dilation, padding="valid")
        np.testing.assert_allclose(out.data, direct_conv(x, k, stride, dilation) + b, rtol=1e-10, atol=1e-12)

    def test_same_padding_matches_padded_direct_convolution(self, rng):
        x = rng.normal(size=(1, 9, 9, 2))
        k = rng.normal(size=(3, 3, 2, 2))
        out = conv2d(Tensor(x, dtype=np.float64), Variable(k, dtype=np.float64), dilation=2, padding="same")
        padded = np.pad(x, ((0, 0), (2, 2), (2, 2), (0, 0)))
        np.testing.assert_allclose(out.data, direct_conv(padded, k, dilation=2), rtol=1e-10, atol=1e-12)

    def test_stride_two_halves_size(self, rng):
        x = Tensor(rng.normal(size=(1, 320, 320, 32)).astype(np.float32))
        k = Variable(rng.normal(size=(1, 1, 32, 16)))
        assert conv2d(x, k, stride=2).shape == (1, 160, 160, 16)

    def test_channel_mismatch_is_shape_error(self, rng):
        with pytest.raises(ShapeError):
            conv2d(Tensor(rng.normal(size=(1, 5, 5, 2))), Variable(rng.normal(size=(3, 3, 3, 1))))

    def test_too_small_input_names_axis(self):
        with pytest.raises(ConfigurationError, match="width"):
            conv_geometry(2, 3, 1, 1, "valid", "width")

    def test_threads_give_same_result(self, rng):
        x = Tensor(rng.normal(size=(4, 12, 12, 3)), requires_grad=True)
        k = Variable(rng.normal(size=(3, 3, 3, 5)))
        single = conv2d(x, k, stride=2).data.copy()
        set_num_threads(3)
        try:
            out = conv2d(x, k, stride=2)
            backward(sum_all(out))
        finally:
            set_num_threads(1)
        np.testing.assert_allclose(out.data, single, rtol=1e-5, atol=1e-5)
        threaded_grad = k.grad.copy()
        k.zero_grad()
        backward(sum_all(conv2d(x, k, stride=2)))
        np.testing.assert_allclose(threaded_grad, k.grad, rtol=1e-4, atol=1e-3)


class TestPooling:
    def test_stream_pool_shapes(self):
        assert max_pool2d(Tensor(np.zeros((1, 318, 318, 16))), 3, 3).shape == (1, 106, 106, 16)
        assert max_pool2d(Tensor(np.zeros((1, 104, 104, 32))), 3, 3).shape == (1, 34, 34, 32)

    def test_max_of_window(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
        assert max_pool2d(x, 2, 2).data.item() == 4.0

    def test_gradient_goes_to_argmax(self):
        x = Tensor(np.array([[1.0, 2.0], [4.0, 3.0]]).reshape(1, 2, 2, 1), requires_grad=True)
        backward(sum_all(max_pool2d(x, 2, 2)))
        np.testing.assert_array_equal(x.grad.reshape(2, 2), [[0.0, 0.0], [1.0, 0.0]])

    def test_window_larger_than_input(self):
        with pytest.raises(ConfigurationError):
            max_pool2d(Tensor(np.zeros((1, 2, 2, 1))), 3, 3)

    def test_global_average(self):
        assert global_avg_pool(Tensor(np.zeros((1, 8, 8, 128)))).shape == (1, 128)
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2, 1))
        assert global_avg_pool(x).data.item() == 2.5
        np.testing.assert_allclose(global_avg_pool(Tensor(np.full((2, 5, 5, 3), 0.7))).data, 0.7, rtol=1e-6)


class TestBatchNorm:
    def _params(self, channels):
        return Variable(np.ones(channels)), Variable(np.zeros(channels)), RunningStats.initial(channels)

    def test_two_point_batch(self, float64):
        gamma, beta, stats = self._params(1)
        x = Tensor(np.array([0.0, 2.0]).reshape(2, 1, 1, 1))
        out = batch_norm(x, gamma, beta, stats, "train")
        np.testing.assert_allclose(out.data.ravel(), [-1.0 / np.sqrt(1.001), 1.0 / np.sqrt(1.001)], rtol=1e-12)

    def test_constant_batch_gives_beta(self, float64):
        gamma, beta, stats = self._params(2)
        beta.assign(np.array([0.3, -0.2]))
        out = batch_norm(Tensor(np.full((2, 3, 3, 2), 5.0)), gamma, beta, stats, "train")
        np.testing.assert_allclose(out.data[..., 0], 0.3)
        np.testing.assert_allclose(out.data[..., 1], -0.2)

    def test_running_stats_update(self, float64):
        gamma, beta, stats = self._params(1)
        x = Tensor(np.array([0.0, 2.0]).reshape(2, 1, 1, 1))
        batch_norm(x, gamma, beta, stats, "train", momentum=0.99)
        np.testing.assert_allclose(stats.mean, [0.01])
        np.testing.assert_allclose(stats.var, [0.99 + 0.01 * 1.0])
        assert stats.updates == 1

    def test_eval_before_train_warns_once(self, caplog, float64):
        gamma, beta, stats = self._params(1)
        x = Tensor(np.array([0.0, 2.0]).reshape(2, 1, 1, 1))
        with caplog.at_level(logging.WARNING):
            out = batch_norm(x, gamma, beta, stats, "eval")
            batch_norm(x, gamma, beta, stats, "eval")
        assert sum("before any training step" in r.message for r in caplog.records) == 1
        np.testing.assert_allclose(out.data.ravel(), np.array([0.0, 2.0]) / np.sqrt(1.001))


class TestActivations:
    def test_sigmoid_centre_and_range(self):
        assert sigmoid(Tensor(np.zeros(1))).data[0] == 0.5
        extreme = sigmoid(Tensor(np.array([-1e4, 1e4]))).data
        assert 0.0 < extreme[0] and extreme[1] < 1.0

    @given(st.floats(-50.0, 50.0))
    def test_sigmoid_symmetry(self, z):
        pair = sigmoid(Tensor(np.array([z, -z]), dtype=np.float64)).data
        assert abs(pair.sum() - 1.0) <= 1e-12

    def test_softmax_closed_form(self):
        out = softmax(Tensor(np.array([[0.0, np.log(3.0)]]), dtype=np.float64)).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], rtol=1e-12)
        np.testing.assert_allclose(softmax(Tensor(np.full((1, 5), 2.3))).data, 0.2, rtol=1e-6)

    @settings(max_examples=50)
    @given(st.lists(st.floats(-30.0, 30.0), min_size=2, max_size=10), st.floats(-100.0, 100.0))
    def test_softmax_shift_invariance(self, logits, shift):
        z = np.array([logits])
        p = softmax(Tensor(z, dtype=np.float64)).data
        q = softmax(Tensor(z + shift, dtype=np.float64)).data
        assert abs(p.sum() - 1.0) <= 1e-9
        np.testing.assert_allclose(p, q, atol=1e-9)

    def test_softmax_needs_rank_two(self):
        with pytest.raises(ShapeError):
            softmax(Tensor(np.zeros((1, 2, 2, 3))))

    def test_dead_relu_has_zero_gradient(self):
        x = Tensor(np.array([-1.0]), requires_grad=True)
        backward(sum_all(relu(x)))
        assert x.grad[0] == 0.0


class TestUpsample:
    def test_factor_four_shape(self):
        assert bilinear_upsample(Tensor(np.zeros((1, 80, 80, 1))), 4).shape == (1, 320, 320, 1)

    def test_ramp_half_pixel(self):
        x = Tensor(np.array([0.0, 1.0]).reshape(1, 1, 2, 1), dtype=np.float64)
        out = bilinear_upsample(x, 2).data
        np.testing.assert_allclose(out[0, 0, :, 0], [0.0, 0.25, 0.75, 1.0])

    def test_constant_preserved(self):
        out = bilinear_upsample(Tensor(np.full((2, 3, 4, 2), 0.375)), 4).data
        assert np.all(out == 0.375)

    def test_affine_ramp_interior(self):
        cols = np.arange(6, dtype=np.float64)
        x = Tensor(np.broadcast_to(cols, (1, 6, 6)).reshape(1, 6, 6, 1).copy(), dtype=np.float64)
        out = bilinear_upsample(x, 4).data[0, 0, :, 0]
        expected = (np.arange(24) + 0.5) / 4 - 0.5
        interior = slice(2, 22)
        np.testing.assert_allclose(out[interior], expected[interior], atol=1e-6)

    def test_interpolation_rows_sum_to_one(self):
        np.testing.assert_allclose(interpolation_matrix(7, 4).sum(axis=1), 1.0)


class TestDenseDropoutStructure:
    def test_dense_identity_plus_bias(self):
        out = dense(Tensor(np.array([[1.0, 2.0]])), Variable(np.eye(2)), Variable(np.ones(2)))
        np.testing.assert_allclose(out.data, [[2.0, 3.0]])

    def test_dense_zero_weight_gives_bias(self, rng):
        out = dense(Tensor(rng.normal(size=(3, 128))), Variable(np.zeros((128, 64))), Variable(np.full(64, 0.5)))
        assert out.shape == (3, 64)
        assert np.all(out.data == 0.5)

    def test_dense_width_mismatch(self):
        with pytest.raises(ShapeError):
            dense(Tensor(np.zeros((1, 3))), Variable(np.zeros((2, 2))), Variable(np.zeros(2)))

    def test_dropout_identity_cases(self, rng):
        x = Tensor(np.ones((2, 4)))
        assert dropout(x, 0.5, "eval", rng) is x
        assert dropout(x, 0.0, "train", rng) is x

    def test_dropout_preserves_expectation(self):
        out = dropout(Tensor(np.ones((1000, 1000))), 0.5, "train", np.random.default_rng(0)).data
        assert abs(out.mean() - 1.0) < 0.01
        assert np.isin(out, [0.0, 2.0]).all()

    def test_dropout_needs_generator_in_train_mode(self):
        with pytest.raises(ContractError):
            dropout(Tensor(np.ones((2, 2))), 0.5, "train", None)

    def test_concat_and_add(self):
        maps = [Tensor(np.zeros((1, 80, 80, 32))) for _ in range(5)]
        assert concat_channels(maps).shape == (1, 80, 80, 160)
        assert concat_channels(maps[:1]) is maps[0]
        np.testing.assert_array_equal(add(Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0, 4.0]))).data, [4.0, 6.0])

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            concat_channels([Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((1, 5, 4, 2)))])


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 3, 2)), requires_grad=True)
        backward(sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_reused_input_accumulates_within_one_pass(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        backward(sum_all(add(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_repeated_calls_accumulate_until_zero_grad(self):
        w = Variable(np.array([0.5, 1.5]))
        backward(sum_all(w))
        backward(sum_all(w))
        np.testing.assert_array_equal(w.grad, [2.0, 2.0])
        w.zero_grad()
        assert np.all(w.grad == 0.0)

    def test_unreached_variable_keeps_zero_grad(self):
        used, unused = Variable(np.ones(2)), Variable(np.ones(2))
        backward(sum_all(used))
        assert np.all(unused.grad == 0.0)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ContractError):
            backward(relu(Variable(np.ones(3))))

    def test_loss_without_graph_rejected(self):
        with pytest.raises(ContractError):
            backward(sum_all(Tensor(np.ones(3))))

    def test_no_grad_records_nothing(self):
        w = Variable(np.ones(3))
        with no_grad():
            out = relu(w)
        assert out.node is None and not out.requires_grad

    def test_frozen_variable_gets_no_gradient(self):
        frozen, live = Variable(np.ones(2), trainable=False), Variable(np.ones(2))
        backward(sum_all(add(frozen, live)))
        assert np.all(frozen.grad == 0.0)
        assert np.all(live.grad == 1.0)
