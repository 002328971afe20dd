import numpy as np
import pytest

from csilab.autograd import Tensor, backward, grad_check, mse_loss, tensor_sum
from csilab.layers import BatchNorm2d, Conv2d, Linear, layer_flops, xavier_init

KERNEL_SET = [(1, 1), (3, 3), (5, 5), (7, 7), (1, 5), (5, 1), (1, 9), (9, 1)]


def direct_conv2d(x, w):
    """Quadruple-loop cross-correlation with same zero padding (oracle)."""
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((n, c_out, h, wd), dtype=x.dtype)
    for b in range(n):
        for o in range(c_out):
            for y in range(h):
                for xx in range(wd):
                    acc = 0.0
                    for c in range(c_in):
                        for i in range(kh):
                            for j in range(kw):
                                yy, xj = y + i - ph, xx + j - pw
                                if 0 <= yy < h and 0 <= xj < wd:
                                    acc += x[b, c, yy, xj] * w[o, c, i, j]
                    out[b, o, y, xx] = acc
    return out


def make_conv(c_in, c_out, kh, kw, rng, data_format="channels_first", dtype=np.float64):
    conv = Conv2d(c_in, c_out, kh, kw, data_format=data_format, dtype=dtype)
    conv.weight.data[...] = rng.normal(size=conv.weight.shape)
    return conv


class TestConv2d:
    def test_identity_kernel(self):
        conv = Conv2d(1, 1, 1, 1, dtype=np.float64)
        conv.weight.data[...] = 1.0
        x = np.random.default_rng(0).normal(size=(2, 1, 5, 5))
        out = conv.forward(Tensor(x))
        np.testing.assert_array_equal(out.data, x)

    def test_ones_kernel_counts_overlap(self):
        conv = Conv2d(1, 1, 3, 3, dtype=np.float64)
        conv.weight.data[...] = 1.0
        out = conv.forward(Tensor(np.ones((1, 1, 3, 3), dtype=np.float64)))
        assert out.data[0, 0, 1, 1] == 9.0
        for y, x in [(0, 0), (0, 2), (2, 0), (2, 2)]:
            assert out.data[0, 0, y, x] == 4.0

    def test_channel_mismatch(self):
        conv = Conv2d(3, 2, 3, 3)
        with pytest.raises(ValueError):
            conv.forward(Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32)))

    @pytest.mark.parametrize("kh,kw", KERNEL_SET)
    def test_matches_direct_convolution_exactly(self, kh, kw):
        rng = np.random.default_rng(kh * 10 + kw)
        x = rng.normal(size=(2, 2, 8, 8))
        conv = make_conv(2, 3, kh, kw, rng)
        expected = direct_conv2d(x, conv.weight.data)
        got = conv.forward(Tensor(x)).data
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)

    def test_random_1x9_against_oracle(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(1, 2, 4, 4))
        conv = make_conv(2, 2, 1, 9, rng)
        np.testing.assert_allclose(
            conv.forward(Tensor(x)).data, direct_conv2d(x, conv.weight.data), atol=1e-12
        )

    @pytest.mark.parametrize("data_format", ["channels_first", "channels_last"])
    def test_formats_agree(self, data_format):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3, 6, 6))
        conv = make_conv(3, 4, 3, 3, rng, data_format=data_format)
        xin = x if data_format == "channels_first" else np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        out = conv.forward(Tensor(xin)).data
        if data_format == "channels_last":
            out = out.transpose(0, 3, 1, 2)
        np.testing.assert_allclose(out, direct_conv2d(x, conv.weight.data), atol=1e-12)

    @pytest.mark.parametrize("kh,kw", [(3, 3), (1, 9), (9, 1), (5, 5)])
    @pytest.mark.parametrize("data_format", ["channels_first", "channels_last"])
    def test_gradients(self, kh, kw, data_format):
        rng = np.random.default_rng(kh + kw)
        shape = (2, 2, 6, 6) if data_format == "channels_first" else (2, 6, 6, 2)
        x = Tensor(rng.uniform(-2, 2, size=shape))
        conv = make_conv(2, 3, kh, kw, rng, data_format=data_format)
        conv.bias = None

        def fn(xv, wv):
            return tensor_sum(conv.forward(xv))

        err = grad_check(fn, [x, conv.weight], sample=40, rng=rng)
        assert err < 1e-4

    def test_bias_gradient(self):
        rng = np.random.default_rng(11)
        conv = Conv2d(2, 3, 3, 3, bias=True, dtype=np.float64)
        conv.weight.data[...] = rng.normal(size=conv.weight.shape)
        x = Tensor(rng.uniform(-1, 1, size=(2, 2, 5, 5)))
        target = Tensor(rng.uniform(0, 1, size=(2, 3, 5, 5)))
        err = grad_check(
            lambda b: mse_loss(conv.forward(x), target), [conv.bias], rng=rng
        )
        assert err < 1e-6


class TestBatchNorm2d:
    def test_train_mode_normalizes(self):
        rng = np.random.default_rng(20)
        bn = BatchNorm2d(3, dtype=np.float64)
        x = Tensor(rng.normal(loc=5.0, scale=3.0, size=(8, 3, 4, 4)))
        out = bn.forward(x, training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-4)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_affine(self):
        rng = np.random.default_rng(21)
        bn = BatchNorm2d(2, dtype=np.float64)
        bn.gamma.data[...] = 2.0
        bn.beta.data[...] = 3.0
        x = Tensor(rng.normal(size=(16, 2, 4, 4)))
        out = bn.forward(x, training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 3.0, atol=1e-4)
        np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 2.0, atol=1e-2)

    def test_eval_mode_matches_hand_formula(self):
        bn = BatchNorm2d(2, dtype=np.float64)
        bn.running_mean[:] = [1.0, -2.0]
        bn.running_var[:] = [4.0, 0.25]
        bn.gamma.data[:] = [2.0, 0.5]
        bn.beta.data[:] = [0.0, 1.0]
        x = np.array([[[[3.0]], [[-1.0]]]])  # (1,2,1,1)
        out = bn.forward(Tensor(x), training=False).data
        expected = (x - np.array([1.0, -2.0]).reshape(1, 2, 1, 1)) / np.sqrt(
            np.array([4.0, 0.25]).reshape(1, 2, 1, 1) + 1e-5
        ) * np.array([2.0, 0.5]).reshape(1, 2, 1, 1) + np.array([0.0, 1.0]).reshape(1, 2, 1, 1)
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_singleton_train_rejected(self):
        bn = BatchNorm2d(2)
        with pytest.raises(ValueError):
            bn.forward(Tensor(np.zeros((1, 2, 1, 1), dtype=np.float32)), training=True)

    def test_running_stats_update_only_in_train(self):
        rng = np.random.default_rng(22)
        bn = BatchNorm2d(2, dtype=np.float64)
        x = Tensor(rng.normal(size=(4, 2, 3, 3)))
        before = bn.running_mean.copy()
        bn.forward(x, training=False)
        np.testing.assert_array_equal(bn.running_mean, before)
        bn.forward(x, training=True)
        assert not np.array_equal(bn.running_mean, before)

    def test_running_update_rule(self):
        rng = np.random.default_rng(23)
        bn = BatchNorm2d(1, dtype=np.float64)
        x = rng.normal(size=(4, 1, 2, 2))
        bn.forward(Tensor(x), training=True)
        assert bn.running_mean[0] == pytest.approx(0.9 * 0.0 + 0.1 * x.mean())
        assert bn.running_var[0] == pytest.approx(0.9 * 1.0 + 0.1 * x.var())

    def test_invariant_to_channel_affine_rescale(self):
        rng = np.random.default_rng(24)
        bn = BatchNorm2d(3, dtype=np.float64)
        x = rng.normal(size=(8, 3, 4, 4))
        base = bn.forward(Tensor(x), training=True).data
        scale = np.array([0.5, 2.0, 1.3]).reshape(1, 3, 1, 1)
        shift = np.array([1.0, -2.0, 0.3]).reshape(1, 3, 1, 1)
        rescaled = bn.forward(Tensor(x * scale + shift), training=True).data
        np.testing.assert_allclose(rescaled, base, atol=1e-3)

    @pytest.mark.parametrize("training", [True, False])
    @pytest.mark.parametrize("data_format", ["channels_first", "channels_last"])
    def test_gradients(self, training, data_format):
        rng = np.random.default_rng(25)
        bn = BatchNorm2d(2, data_format=data_format, dtype=np.float64)
        bn.running_mean[:] = rng.normal(size=2)
        bn.running_var[:] = rng.uniform(0.5, 2.0, size=2)
        shape = (4, 2, 3, 3) if data_format == "channels_first" else (4, 3, 3, 2)
        x = Tensor(rng.uniform(-2, 2, size=shape))
        target = Tensor(rng.uniform(size=shape))

        def fn(xv, g, b):
            return mse_loss(bn.forward(xv, training=training), target)

        err = grad_check(fn, [x, bn.gamma, bn.beta], rng=rng)
        assert err < 1e-4


class TestLinear:
    def test_identity(self):
        lin = Linear(4, 4, dtype=np.float64)
        lin.weight.data[...] = np.eye(4)
        x = np.random.default_rng(30).normal(size=(3, 4))
        np.testing.assert_allclose(lin.forward(Tensor(x)).data, x)

    def test_compression_shape(self):
        lin = Linear(2048, 512)
        out = lin.forward(Tensor(np.zeros((1, 2048), dtype=np.float32)))
        assert out.shape == (1, 512)

    def test_matches_matmul_plus_bias(self):
        rng = np.random.default_rng(31)
        lin = Linear(5, 3, dtype=np.float64)
        lin.weight.data[...] = rng.normal(size=(3, 5))
        lin.bias.data[...] = rng.normal(size=3)
        x = rng.normal(size=(4, 5))
        expected = x @ lin.weight.data.T + lin.bias.data
        np.testing.assert_array_equal(lin.forward(Tensor(x)).data, expected)

    def test_feature_mismatch(self):
        with pytest.raises(ValueError):
            Linear(4, 2).forward(Tensor(np.zeros((1, 3), dtype=np.float32)))

    def test_gradients(self):
        rng = np.random.default_rng(32)
        lin = Linear(6, 4, dtype=np.float64)
        lin.weight.data[...] = rng.normal(size=(4, 6))
        x = Tensor(rng.uniform(-2, 2, size=(3, 6)))
        target = Tensor(rng.uniform(size=(3, 4)))
        err = grad_check(lambda xv, w, b: mse_loss(lin.forward(xv), target),
                         [x, lin.weight, lin.bias], rng=rng)
        assert err < 1e-4


class TestXavierInit:
    def test_linear_bound(self):
        lin = Linear(2048, 512)
        xavier_init(lin, np.random.default_rng(0))
        a = np.sqrt(6.0 / (2048 + 512))
        assert a == pytest.approx(0.04841, abs=5e-6)
        assert np.abs(lin.weight.data).max() <= a
        np.testing.assert_array_equal(lin.bias.data, 0.0)

    def test_conv_fan_counts_kernel_area(self):
        conv = Conv2d(2, 7, 3, 3)
        xavier_init(conv, np.random.default_rng(1))
        a = np.sqrt(6.0 / (2 * 9 + 7 * 9))
        assert np.abs(conv.weight.data).max() <= a
        assert np.abs(conv.weight.data).max() > 0.9 * a  # actually fills the range

    def test_empirical_variance(self):
        lin = Linear(500, 200)
        xavier_init(lin, np.random.default_rng(2))
        a = np.sqrt(6.0 / 700)
        var = lin.weight.data.var()
        assert abs(var - a * a / 3.0) < 0.05 * a * a / 3.0

    def test_determinism(self):
        c1 = Conv2d(2, 2, 3, 3)
        c2 = Conv2d(2, 2, 3, 3)
        xavier_init(c1, np.random.default_rng(77))
        xavier_init(c2, np.random.default_rng(77))
        np.testing.assert_array_equal(c1.weight.data, c2.weight.data)

    def test_rejects_batchnorm(self):
        with pytest.raises(TypeError):
            xavier_init(BatchNorm2d(2), np.random.default_rng(0))


class TestLayerFlops:
    def test_conv_5x5(self):
        assert layer_flops(Conv2d(2, 2, 5, 5), 32, 32) == 102_400

    def test_linear(self):
        assert layer_flops(Linear(2048, 512), 1, 1) == 1_048_576

    def test_conv_1x1_merge(self):
        assert layer_flops(Conv2d(14, 2, 1, 1), 32, 32) == 28_672

    def test_batchnorm_free(self):
        assert layer_flops(BatchNorm2d(7), 32, 32) == 0

    def test_factorized_pair_vs_square(self):
        # 1x9 then 9x1 keeps the 9x9 receptive field at 2*9/81 of the cost
        pair = layer_flops(Conv2d(7, 7, 1, 9), 32, 32) + layer_flops(Conv2d(7, 7, 9, 1), 32, 32)
        square = layer_flops(Conv2d(7, 7, 9, 9), 32, 32)
        assert pair * 81 == square * 18
