import numpy as np
import pytest

from maskedge import audit, kernels, nnops
from maskedge.nnops import (
    ConvSpec,
    avg_pool2d,
    conv2d,
    dense,
    inverted_residual,
    relu6,
    residual_add,
    sigmoid_scores,
    softmax_scores,
)
from maskedge.qtensor import FTensor, QTensor, QuantizationError, QuantParams, dequantize, quantize

from oracles import ref_conv2d


def _qt(values, qp):
    return QTensor(quantize(np.asarray(values, dtype=np.float64), qp), qp)


def _random_qtensor(rng, shape, qp):
    return QTensor(rng.integers(0, 256, shape, dtype=np.uint8), qp)


class TestConv2dFloat:
    def test_scalar_product(self):
        x = FTensor(np.full((1, 1, 1, 1), 5.0, np.float32))
        w = FTensor(np.full((1, 1, 1, 1), 3.0, np.float32))
        out = conv2d(x, w, np.zeros(1), ConvSpec(kernel=(1, 1)))
        assert out.array.reshape(()) == 15.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = FTensor(rng.normal(size=(1, 5, 5, 3)).astype(np.float32))
        w = np.zeros((1, 1, 3, 3), np.float32)
        for c in range(3):
            w[0, 0, c, c] = 1.0
        out = conv2d(x, FTensor(w), np.zeros(3), ConvSpec(kernel=(1, 1)))
        assert np.array_equal(out.array, x.array)

    def test_matches_reference(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 6, 7, 4))
        w = rng.normal(size=(3, 3, 4, 5))
        b = rng.normal(size=5)
        for stride, padding in [((1, 1), "same"), ((2, 2), "same"), ((1, 1), "valid"), ((2, 1), "valid")]:
            out = conv2d(FTensor(x.astype(np.float32)), FTensor(w.astype(np.float32)), b,
                         ConvSpec(kernel=(3, 3), stride=stride, padding=padding))
            ref = ref_conv2d(x.astype(np.float32).astype(np.float64),
                             w.astype(np.float32).astype(np.float64), b, stride, padding)
            np.testing.assert_allclose(out.array, ref, rtol=1e-5, atol=1e-5)

    def test_same_padding_preserves_dims_at_stride_1(self):
        rng = np.random.default_rng(2)
        for h, w_, k in [(5, 5, 3), (8, 6, 3), (4, 9, 1), (7, 7, 2)]:
            x = FTensor(rng.normal(size=(1, h, w_, 2)).astype(np.float32))
            w = FTensor(rng.normal(size=(k, k, 2, 3)).astype(np.float32))
            out = conv2d(x, w, None, ConvSpec(kernel=(k, k)))
            assert out.array.shape[1:3] == (h, w_)


class TestConv2dQuantized:
    def test_quant_vs_float_oracle_depthwise(self):
        rng = np.random.default_rng(3)
        in_qp = QuantParams(2 / 255, 128)
        w_qp = QuantParams(1 / 255, 120)
        x = _random_qtensor(rng, (1, 4, 4, 2), in_qp)
        w = _random_qtensor(rng, (3, 3, 2, 1), w_qp)
        bias_real = rng.uniform(-0.05, 0.05, 2)
        bias = np.round(bias_real / (in_qp.scale * w_qp.scale)).astype(np.int32)
        spec = ConvSpec(kernel=(3, 3), depthwise=True)
        ref = ref_conv2d(dequantize(x.array, in_qp), dequantize(w.array, w_qp),
                         bias * in_qp.scale * w_qp.scale, (1, 1), "same", depthwise=True)
        out_qp = QuantParams((ref.max() - min(ref.min(), 0.0) + 1e-6) / 255,
                             int(np.clip(round(-min(ref.min(), 0.0) / ((ref.max() - min(ref.min(), 0.0) + 1e-6) / 255)), 0, 255)))
        out = conv2d(x, w, bias, spec, out_qp)
        err = np.abs(dequantize(out.array, out_qp) - ref)
        assert err.max() <= out_qp.scale  # within 1 output quantum

    def test_quant_vs_float_oracle_full(self):
        rng = np.random.default_rng(4)
        in_qp = QuantParams(1 / 127.5, 128)
        w_qp = QuantParams(0.8 / 255, 131)
        x = _random_qtensor(rng, (1, 5, 5, 3), in_qp)
        w = _random_qtensor(rng, (3, 3, 3, 4), w_qp)
        bias = rng.integers(-50, 50, 4).astype(np.int32)
        spec = ConvSpec(kernel=(3, 3), stride=(2, 2))
        ref = ref_conv2d(dequantize(x.array, in_qp), dequantize(w.array, w_qp),
                         bias * in_qp.scale * w_qp.scale, (2, 2), "same")
        span = ref.max() - min(ref.min(), 0.0) + 1e-6
        out_qp = QuantParams(span / 255, int(np.clip(round(-min(ref.min(), 0.0) / (span / 255)), 0, 255)))
        out = conv2d(x, w, bias, spec, out_qp)
        err = np.abs(dequantize(out.array, out_qp) - ref)
        assert err.max() <= out_qp.scale

    def test_missing_qparams_rejected(self):
        x = _random_qtensor(np.random.default_rng(0), (1, 2, 2, 1), QuantParams(1.0, 0))
        w = _random_qtensor(np.random.default_rng(1), (1, 1, 1, 1), QuantParams(1.0, 0))
        with pytest.raises(QuantizationError):
            conv2d(x, w, np.zeros(1, np.int32), ConvSpec(kernel=(1, 1)), out_qp=None)

    def test_float_bias_rejected_on_quant_path(self):
        x = _random_qtensor(np.random.default_rng(0), (1, 2, 2, 1), QuantParams(1.0, 0))
        w = _random_qtensor(np.random.default_rng(1), (1, 1, 1, 1), QuantParams(1.0, 0))
        with pytest.raises(QuantizationError):
            conv2d(x, w, np.zeros(1, np.float32), ConvSpec(kernel=(1, 1)), QuantParams(1.0, 0))

    def test_shape_mismatch(self):
        x = FTensor(np.zeros((1, 4, 4, 3), np.float32))
        w = FTensor(np.zeros((3, 3, 2, 4), np.float32))
        with pytest.raises(ValueError):
            conv2d(x, w, None, ConvSpec(kernel=(3, 3)))

    def test_same_padding_uses_zero_point(self):
        # An all-zero-point input must convolve to exactly the bias, padding included.
        in_qp = QuantParams(0.05, 77)
        w_qp = QuantParams(0.02, 13)
        x = QTensor(np.full((1, 3, 3, 1), 77, np.uint8), in_qp)
        w = QTensor(np.full((3, 3, 1, 2), 200, np.uint8), w_qp)
        out_qp = QuantParams(0.01, 128)
        out = conv2d(x, w, np.zeros(2, np.int32), ConvSpec(kernel=(3, 3)), out_qp)
        assert np.all(out.array == 128)  # real zero everywhere


class TestInvertedResidual:
    def _weights(self, rng, cin, expand, cout):
        ew = FTensor(rng.normal(scale=0.3, size=(1, 1, cin, expand)).astype(np.float32))
        dw = FTensor(rng.normal(scale=0.3, size=(3, 3, expand, 1)).astype(np.float32))
        pw = FTensor(rng.normal(scale=0.3, size=(1, 1, expand, cout)).astype(np.float32))
        biases = (np.zeros(expand), np.zeros(expand), np.zeros(cout))
        return ew, dw, pw, biases

    def test_zero_kernels_keep_residual_input(self):
        rng = np.random.default_rng(5)
        x = FTensor(rng.normal(size=(1, 4, 4, 3)).astype(np.float32))
        ew = FTensor(np.zeros((1, 1, 3, 6), np.float32))
        dw = FTensor(np.zeros((3, 3, 6, 1), np.float32))
        pw = FTensor(np.zeros((1, 1, 6, 3), np.float32))
        out = inverted_residual(x, ew, dw, pw, (np.zeros(6), np.zeros(6), np.zeros(3)), stride=1)
        assert np.array_equal(out.array, x.array)

    def test_stride_two_halves_spatial(self):
        rng = np.random.default_rng(6)
        x = FTensor(rng.normal(size=(1, 8, 8, 3)).astype(np.float32))
        ew, dw, pw, biases = self._weights(rng, 3, 6, 5)
        out = inverted_residual(x, ew, dw, pw, biases, stride=2)
        assert out.array.shape == (1, 4, 4, 5)

    def test_quant_matches_float_within_three_quanta(self):
        rng = np.random.default_rng(7)
        cin, expand = 4, 8
        x_real = rng.uniform(-1, 1, (1, 6, 6, cin))
        ew, dw, pw, _ = self._weights(rng, cin, expand, cin)
        float_out = inverted_residual(
            FTensor(x_real.astype(np.float32)), ew, dw, pw,
            (np.zeros(expand), np.zeros(expand), np.zeros(cin)), stride=1)

        in_qp = QuantParams(2 / 255, 128)
        xq = _qt(x_real, in_qp)

        def wq(ft):
            lo, hi = min(float(ft.array.min()), 0.0), max(float(ft.array.max()), 0.0)
            scale = (hi - lo) / 255
            zp = int(np.clip(round(-lo / scale), 0, 255))
            qp = QuantParams(scale, zp)
            return QTensor(quantize(ft.array.astype(np.float64), qp), qp)

        ewq, dwq, pwq = wq(ew), wq(dw), wq(pw)

        def act_qp(arr):
            lo, hi = min(float(arr.min()), 0.0), max(float(arr.max()), 0.0)
            scale = max(hi - lo, 1e-6) / 255
            return QuantParams(scale, int(np.clip(round(-lo / scale), 0, 255)))

        # stage qparams from the float intermediates (the calibration analogue)
        h1 = conv2d(FTensor(x_real.astype(np.float32)), ew, np.zeros(expand),
                    ConvSpec(kernel=(1, 1), fused_activation="relu6"))
        h2 = conv2d(h1, dw, np.zeros(expand),
                    ConvSpec(kernel=(3, 3), depthwise=True, fused_activation="relu6"))
        h3 = conv2d(h2, pw, np.zeros(cin), ConvSpec(kernel=(1, 1)))
        qps = (act_qp(h1.array), act_qp(h2.array), act_qp(h3.array), act_qp(float_out.array))

        biases_q = (np.zeros(expand, np.int32), np.zeros(expand, np.int32), np.zeros(cin, np.int32))
        quant_out = inverted_residual(xq, ewq, dwq, pwq, biases_q, stride=1, out_qps=qps)
        err = np.abs(dequantize(quant_out.array, quant_out.qparams) - float_out.array)
        assert err.max() <= 3 * quant_out.qparams.scale


class TestAvgPool:
    def test_constant_float(self):
        x = FTensor(np.full((1, 3, 5, 2), 4.25, np.float32))
        out = avg_pool2d(x)
        assert out.array.shape == (1, 1, 1, 2)
        assert np.all(out.array == np.float32(4.25))

    def test_mean_example(self):
        x = FTensor(np.array([1.0, 2.0, 3.0, 4.0], np.float32).reshape(1, 2, 2, 1))
        assert avg_pool2d(x).array.reshape(()) == np.float32(2.5)

    def test_quant_constant(self):
        qp = QuantParams(0.3, 7)
        x = QTensor(np.full((1, 4, 4, 3), 200, np.uint8), qp)
        out = avg_pool2d(x)
        assert np.all(out.array == 200)
        assert out.qparams == qp

    def test_quant_rounded_mean(self):
        qp = QuantParams(1.0, 0)
        x = QTensor(np.array([1, 2, 2, 2], np.uint8).reshape(1, 2, 2, 1), qp)
        # mean 1.75 rounds half away to 2
        assert avg_pool2d(x).array.reshape(()) == 2


class TestDense:
    def test_identity(self):
        x = FTensor(np.arange(4, dtype=np.float32).reshape(1, 4))
        out = dense(x, FTensor(np.eye(4, dtype=np.float32)), np.zeros(4))
        assert np.array_equal(out.array, x.array)

    def test_zero_weights_relu_bias(self):
        x = FTensor(np.ones((1, 3), np.float32))
        b = np.array([2.0, -3.0])
        out = dense(x, FTensor(np.zeros((3, 2), np.float32)), b, activation="relu")
        assert np.array_equal(out.array, np.array([[2.0, 0.0]], np.float32))

    def test_random_matches_matmul(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(1, 16)).astype(np.float32)
        w = rng.normal(size=(16, 4)).astype(np.float32)
        b = rng.normal(size=4)
        out = dense(FTensor(x), FTensor(w), b)
        expected = x.astype(np.float64) @ w.astype(np.float64) + b
        np.testing.assert_allclose(out.array, expected, rtol=1e-6)

    def test_quantized_matches_float_oracle(self):
        rng = np.random.default_rng(9)
        x_real = rng.uniform(-1, 1, (1, 12))
        w_real = rng.uniform(-0.5, 0.5, (12, 3))
        in_qp = QuantParams(2 / 255, 128)
        w_qp = QuantParams(1 / 255, 127)
        xq = _qt(x_real, in_qp)
        wq = _qt(w_real, w_qp)
        ref = dequantize(xq.array, in_qp) @ dequantize(wq.array, w_qp)
        span = max(ref.max(), 0.0) - min(ref.min(), 0.0) + 1e-9
        out_qp = QuantParams(span / 255, int(np.clip(round(-min(ref.min(), 0.0) / (span / 255)), 0, 255)))
        out = dense(xq, wq, np.zeros(3, np.int32), out_qp=out_qp)
        assert np.abs(dequantize(out.array, out_qp) - ref).max() <= out_qp.scale

    def test_bad_activation(self):
        x = FTensor(np.zeros((1, 2), np.float32))
        with pytest.raises(ValueError):
            dense(x, FTensor(np.zeros((2, 2), np.float32)), None, activation="relu6")


class TestActivations:
    def test_relu6_float(self):
        x = FTensor(np.array([-1.0, 3.0, 10.0], np.float32).reshape(1, 1, 1, 3))
        assert list(relu6(x).array.reshape(-1)) == [0.0, 3.0, 6.0]

    def test_relu6_quant_clamps_to_representations(self):
        qp = QuantParams(0.05, 100)
        x = QTensor(np.array([0, 100, 150, 255], np.uint8).reshape(1, 1, 1, 4), qp)
        out = relu6(x)
        q6 = quantize(6.0, qp)
        assert list(out.array.reshape(-1)) == [100, 100, 150, q6]

    def test_sigmoid_symmetry(self):
        x = FTensor(np.array([0.0], np.float32))
        assert sigmoid_scores(x).array[0] == np.float32(0.5)

    def test_sigmoid_extremes_finite(self):
        x = FTensor(np.array([-80.0, 80.0], np.float32))
        out = sigmoid_scores(x).array
        assert 0.0 <= out[0] < 1e-30
        assert out[1] == np.float32(1.0)

    def test_softmax_symmetry(self):
        out = softmax_scores(FTensor(np.zeros((1, 2), np.float32))).array
        assert np.array_equal(out, np.array([[0.5, 0.5]], np.float32))

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(10)
        x = FTensor(rng.normal(scale=5, size=(20, 7)).astype(np.float32))
        sums = softmax_scores(x).array.sum(axis=1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)

    def test_sigmoid_rejects_quantized(self):
        with pytest.raises(TypeError):
            sigmoid_scores(QTensor(np.zeros((1, 1), np.uint8), QuantParams(1.0, 0)))


class TestResidualAdd:
    def test_float_add(self):
        a = FTensor(np.ones((1, 2, 2, 1), np.float32))
        b = FTensor(np.full((1, 2, 2, 1), 2.0, np.float32))
        assert np.all(residual_add(a, b).array == 3.0)

    def test_quant_add_matches_real_sum(self):
        rng = np.random.default_rng(11)
        qa = QuantParams(0.01, 120)
        qb = QuantParams(0.013, 140)
        a = _random_qtensor(rng, (1, 3, 3, 2), qa)
        b = _random_qtensor(rng, (1, 3, 3, 2), qb)
        real = dequantize(a.array, qa) + dequantize(b.array, qb)
        span = max(real.max(), 0.0) - min(real.min(), 0.0) + 1e-9
        out_qp = QuantParams(span / 255, int(np.clip(round(-min(real.min(), 0.0) / (span / 255)), 0, 255)))
        out = residual_add(a, b, out_qp)
        assert np.abs(dequantize(out.array, out_qp) - real).max() <= 2 * out_qp.scale

    def test_requires_out_qparams(self):
        qp = QuantParams(1.0, 0)
        a = QTensor(np.zeros((1, 1, 1, 1), np.uint8), qp)
        with pytest.raises(QuantizationError):
            residual_add(a, a, None)


class TestAccumulatorOverflow:
    def _overflowing_call(self):
        qp = QuantParams(0.01, 0)
        x = QTensor(np.full((1, 3, 3, 4), 255, np.uint8), qp)
        w = QTensor(np.full((3, 3, 4, 2), 255, np.uint8), qp)
        bias = np.full(2, 2**31 - 1, np.int32)
        return conv2d(x, w, bias, ConvSpec(kernel=(3, 3), padding="valid"), QuantParams(1.0, 0))

    def test_saturate_mode_identical_across_backends(self):
        from maskedge.qtensor import set_overflow_mode
        set_overflow_mode("saturate")
        got_numba = self._overflowing_call()
        prev = kernels.set_backend("numpy")
        try:
            got_numpy = self._overflowing_call()
        finally:
            kernels.set_backend(prev)
        assert np.array_equal(got_numba.array, got_numpy.array)

    def test_check_mode_raises_on_both_backends(self):
        from maskedge.qtensor import AccumulatorOverflowError, set_overflow_mode
        set_overflow_mode("check")
        try:
            with pytest.raises(AccumulatorOverflowError):
                self._overflowing_call()
            prev = kernels.set_backend("numpy")
            try:
                with pytest.raises(AccumulatorOverflowError):
                    self._overflowing_call()
            finally:
                kernels.set_backend(prev)
        finally:
            set_overflow_mode("saturate")


class TestIntegerOnlyAudit:
    def _run_quant_ops(self):
        rng = np.random.default_rng(12)
        in_qp = QuantParams(2 / 255, 128)
        w_qp = QuantParams(1 / 255, 127)
        out_qp = QuantParams(0.02, 128)
        x = _random_qtensor(rng, (1, 4, 4, 3), in_qp)
        w = _random_qtensor(rng, (3, 3, 3, 4), w_qp)
        dw = _random_qtensor(rng, (3, 3, 3, 1), w_qp)
        conv2d(x, w, np.zeros(4, np.int32), ConvSpec(kernel=(3, 3), fused_activation="relu6"), out_qp)
        conv2d(x, dw, np.zeros(3, np.int32), ConvSpec(kernel=(3, 3), depthwise=True), out_qp)
        residual_add(x, x, out_qp)
        avg_pool2d(x)
        relu6(x)

    def test_numpy_backend_integer_only(self, numpy_backend):
        with audit.arithmetic_audit() as records:
            self._run_quant_ops()
        assert records, "audit mode recorded nothing"
        for tag, dtype in records:
            assert np.issubdtype(np.dtype(dtype), np.integer), (tag, dtype)

    def test_numba_backend_integer_only(self):
        with audit.arithmetic_audit() as records:
            self._run_quant_ops()
        assert records
        for tag, dtype in records:
            assert np.issubdtype(np.dtype(dtype), np.integer), (tag, dtype)


class TestDepthwiseMultiplier:
    def test_multiplier_two_matches_oracle(self):
        rng = np.random.default_rng(21)
        in_qp = QuantParams(2 / 255, 128)
        w_qp = QuantParams(1 / 255, 140)
        x = _random_qtensor(rng, (1, 5, 5, 3), in_qp)
        w = _random_qtensor(rng, (3, 3, 3, 2), w_qp)  # channel multiplier 2
        bias = rng.integers(-40, 40, 6).astype(np.int32)
        spec = ConvSpec(kernel=(3, 3), depthwise=True)
        ref = ref_conv2d(dequantize(x.array, in_qp), dequantize(w.array, w_qp),
                         bias * in_qp.scale * w_qp.scale, (1, 1), "same", depthwise=True)
        span = ref.max() - min(ref.min(), 0.0) + 1e-6
        out_qp = QuantParams(span / 255, int(np.clip(round(-min(ref.min(), 0.0) / (span / 255)), 0, 255)))
        out = conv2d(x, w, bias, spec, out_qp)
        assert out.array.shape == (1, 5, 5, 6)
        assert np.abs(dequantize(out.array, out_qp) - ref).max() <= out_qp.scale


class TestBackendEquivalence:
    def test_quant_conv_bit_identical(self):
        rng = np.random.default_rng(13)
        in_qp = QuantParams(1 / 127.5, 128)
        w_qp = QuantParams(1 / 255, 111)
        out_qp = QuantParams(0.05, 128)
        for shape, wshape, depthwise, stride in [
            ((1, 6, 6, 3), (3, 3, 3, 4), False, (1, 1)),
            ((1, 8, 8, 4), (3, 3, 4, 1), True, (2, 2)),
            ((1, 7, 7, 3), (3, 3, 3, 2), True, (1, 1)),
            ((1, 5, 7, 2), (2, 2, 2, 6), False, (2, 1)),
        ]:
            x = _random_qtensor(rng, shape, in_qp)
            w = _random_qtensor(rng, wshape, w_qp)
            co = wshape[2] * wshape[3] if depthwise else wshape[3]
            bias = rng.integers(-100, 100, co).astype(np.int32)
            spec = ConvSpec(kernel=wshape[:2], stride=stride, depthwise=depthwise,
                            fused_activation="relu6")
            out_numba = conv2d(x, w, bias, spec, out_qp)
            prev = kernels.set_backend("numpy")
            try:
                out_numpy = conv2d(x, w, bias, spec, out_qp)
            finally:
                kernels.set_backend(prev)
            assert np.array_equal(out_numba.array, out_numpy.array)

    def test_float_conv_close_across_backends(self):
        rng = np.random.default_rng(14)
        x = FTensor(rng.normal(size=(1, 6, 6, 3)).astype(np.float32))
        w = FTensor(rng.normal(size=(3, 3, 3, 4)).astype(np.float32))
        b = rng.normal(size=4)
        out_numba = conv2d(x, w, b, ConvSpec(kernel=(3, 3)))
        prev = kernels.set_backend("numpy")
        try:
            out_numpy = conv2d(x, w, b, ConvSpec(kernel=(3, 3)))
        finally:
            kernels.set_backend(prev)
        np.testing.assert_allclose(out_numba.array, out_numpy.array, rtol=1e-6)

    def test_quant_add_bit_identical(self):
        rng = np.random.default_rng(15)
        qa = QuantParams(0.011, 117)
        qb = QuantParams(0.017, 131)
        out_qp = QuantParams(0.02, 124)
        a = _random_qtensor(rng, (1, 6, 6, 5), qa)
        b = _random_qtensor(rng, (1, 6, 6, 5), qb)
        out_numba = residual_add(a, b, out_qp)
        prev = kernels.set_backend("numpy")
        try:
            out_numpy = residual_add(a, b, out_qp)
        finally:
            kernels.set_backend(prev)
        assert np.array_equal(out_numba.array, out_numpy.array)

    @pytest.mark.parametrize("trial", range(20))
    def test_randomized_conv_stress(self, trial):
        # broad randomized sweep over shapes, strides, paddings, activations,
        # and qparams: both backends must agree bit-for-bit
        rng = np.random.default_rng(9000 + trial)
        h = int(rng.integers(2, 10))
        w_ = int(rng.integers(2, 10))
        ci = int(rng.integers(1, 6))
        depthwise = bool(rng.integers(0, 2))
        kh = int(rng.integers(1, min(4, h) + 1))
        kw = int(rng.integers(1, min(4, w_) + 1))
        stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        padding = "same" if rng.integers(0, 2) else "valid"
        activation = ("none", "relu", "relu6")[int(rng.integers(0, 3))]
        mult_or_co = int(rng.integers(1, 5))
        wshape = (kh, kw, ci, mult_or_co)
        in_qp = QuantParams(float(rng.uniform(0.005, 0.05)), int(rng.integers(0, 256)))
        w_qp = QuantParams(float(rng.uniform(0.002, 0.02)), int(rng.integers(0, 256)))
        out_qp = QuantParams(float(rng.uniform(0.01, 0.1)), int(rng.integers(0, 256)))
        x = _random_qtensor(rng, (1, h, w_, ci), in_qp)
        wt = _random_qtensor(rng, wshape, w_qp)
        co = ci * mult_or_co if depthwise else mult_or_co
        bias = rng.integers(-500, 500, co).astype(np.int32)
        spec = ConvSpec(kernel=(kh, kw), stride=stride, padding=padding,
                        depthwise=depthwise, fused_activation=activation)
        if padding == "valid" and ((h - kh) < 0 or (w_ - kw) < 0):
            return
        out_numba = conv2d(x, wt, bias, spec, out_qp)
        prev = kernels.set_backend("numpy")
        try:
            out_numpy = conv2d(x, wt, bias, spec, out_qp)
        finally:
            kernels.set_backend(prev)
        assert np.array_equal(out_numba.array, out_numpy.array)
