import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskedge import qtensor
from maskedge.qtensor import (
    AccumulatorOverflowError,
    FixedPointMultiplier,
    QuantizationError,
    QuantParams,
    compute_multiplier,
    dequantize,
    fit_accumulator,
    quantize,
    requantize,
    requantize_array,
    round_half_away,
    set_overflow_mode,
)


@pytest.mark.parametrize("x,scale,zp,expected", [
    (0.0, 0.5, 128, 128),
    (1.0, 0.5, 128, 130),
    (1000.0, 0.5, 128, 255),
    (-1000.0, 0.5, 128, 0),
])
def test_quantize_examples(x, scale, zp, expected):
    assert quantize(x, QuantParams(scale, zp)) == expected


@pytest.mark.parametrize("q,scale,zp,expected", [
    (128, 0.5, 128, 0.0),
    (130, 0.5, 128, 1.0),
    (0, 0.1, 10, -1.0),
])
def test_dequantize_examples(q, scale, zp, expected):
    assert dequantize(q, QuantParams(scale, zp)) == pytest.approx(expected, abs=1e-12)


def test_round_half_away_ties():
    assert round_half_away(2.5) == 3.0
    assert round_half_away(-2.5) == -3.0
    assert round_half_away(0.5) == 1.0
    assert round_half_away(-0.5) == -1.0
    # numpy's default would give 2.0 here
    assert np.round(2.5) == 2.0


@pytest.mark.parametrize("qp", [
    QuantParams(0.5, 128),
    QuantParams(0.0117, 0),
    QuantParams(3.7, 255),
    QuantParams(1e-4, 17),
])
def test_round_trip_all_values(qp):
    q = np.arange(256, dtype=np.uint8)
    assert np.array_equal(quantize(dequantize(q, qp), qp), q)


@given(st.floats(min_value=1e-6, max_value=100.0), st.integers(0, 255),
       st.floats(-1000.0, 1000.0))
@settings(max_examples=200, deadline=None)
def test_quantization_error_bound(scale, zp, x):
    qp = QuantParams(scale, zp)
    lo, hi = dequantize(0, qp), dequantize(255, qp)
    x = min(max(x, lo), hi)
    err = abs(dequantize(quantize(x, qp), qp) - x)
    assert err <= scale / 2 + 1e-12


class TestQuantParamsValidation:
    def test_zero_scale(self):
        with pytest.raises(QuantizationError):
            QuantParams(0.0, 0)

    def test_negative_scale(self):
        with pytest.raises(QuantizationError):
            QuantParams(-1.0, 0)

    def test_nan_scale(self):
        with pytest.raises(QuantizationError):
            QuantParams(float("nan"), 0)

    def test_zero_point_range(self):
        with pytest.raises(QuantizationError):
            QuantParams(1.0, 256)
        with pytest.raises(QuantizationError):
            QuantParams(1.0, -1)


class TestComputeMultiplier:
    def test_half(self):
        m = compute_multiplier(0.5)
        assert m.m0 == 1 << 30
        assert m.right_shift == 0

    def test_quarter(self):
        m = compute_multiplier(0.25)
        assert m.m0 == 1 << 30
        assert m.right_shift == 1
        assert m.value == 0.25

    def test_point_three(self):
        m = compute_multiplier(0.3)
        assert abs(m.value - 0.3) <= 2.0**-31

    @pytest.mark.parametrize("bad", [0.0, 1.0, -0.5, 2.0, float("inf"), float("nan")])
    def test_rejects_out_of_range(self, bad):
        with pytest.raises(QuantizationError):
            compute_multiplier(bad)

    @given(st.floats(min_value=1e-12, max_value=1.0, exclude_max=True))
    @settings(max_examples=300, deadline=None)
    def test_reconstruction_identity(self, m):
        fpm = compute_multiplier(m)
        assert (1 << 30) <= fpm.m0 < (1 << 31)
        assert fpm.right_shift >= 0
        assert abs(fpm.value - m) <= 2.0**-31

    def test_near_one_stays_normalized(self):
        fpm = compute_multiplier(1.0 - 2.0**-40)
        assert fpm.m0 == (1 << 31) - 1
        assert fpm.right_shift == 0


class TestRequantize:
    def test_zero_accumulator(self):
        for m in (0.5, 0.3, 0.9999):
            assert requantize(0, compute_multiplier(m), 128) == 128

    def test_examples(self):
        half = compute_multiplier(0.5)
        assert requantize(100, half, 0) == 50
        assert requantize(-300, half, 128) == 0

    def test_saturates_high(self):
        assert requantize(10**6, compute_multiplier(0.9), 0) == 255

    def test_real_valued_oracle(self):
        rng = np.random.default_rng(42)
        for m in (0.5, 0.25, 0.3, 0.7331, 0.011, 0.99):
            fpm = compute_multiplier(m)
            accs = rng.integers(-(2**24) + 1, 2**24, size=500)
            for acc in accs:
                got = requantize(int(acc), fpm, 128)
                want = min(255, max(0, round(acc * m) + 128))
                assert abs(got - want) <= 1, (m, acc)

    def test_array_matches_scalar(self):
        rng = np.random.default_rng(7)
        accs = rng.integers(-(2**30), 2**30, size=2000).astype(np.int64)
        for m in (0.5, 0.123, 0.987):
            fpm = compute_multiplier(m)
            arr = requantize_array(accs, fpm, 11)
            ref = np.array([requantize(int(a), fpm, 11) for a in accs], dtype=np.uint8)
            assert np.array_equal(arr, ref)

    def test_deterministic(self):
        fpm = compute_multiplier(0.137)
        accs = np.arange(-5000, 5000, dtype=np.int64)
        a = requantize_array(accs, fpm, 99)
        b = requantize_array(accs.copy(), fpm, 99)
        assert np.array_equal(a, b)


class TestFixedPointMultiplierValidation:
    def test_m0_too_small(self):
        with pytest.raises(QuantizationError):
            FixedPointMultiplier(m0=(1 << 30) - 1, right_shift=0)

    def test_m0_too_large(self):
        with pytest.raises(QuantizationError):
            FixedPointMultiplier(m0=1 << 31, right_shift=0)

    def test_negative_shift(self):
        with pytest.raises(QuantizationError):
            FixedPointMultiplier(m0=1 << 30, right_shift=-1)


class TestOverflowModes:
    def test_saturate(self):
        set_overflow_mode("saturate")
        out = fit_accumulator(np.array([2**40, -(2**40), 5], dtype=np.int64))
        assert list(out) == [qtensor.INT32_MAX, qtensor.INT32_MIN, 5]

    def test_check_raises(self):
        set_overflow_mode("check")
        try:
            with pytest.raises(AccumulatorOverflowError):
                fit_accumulator(np.array([2**40], dtype=np.int64))
        finally:
            set_overflow_mode("saturate")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            set_overflow_mode("wrap")
