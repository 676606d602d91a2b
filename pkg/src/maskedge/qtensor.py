"""Quantized tensors and integer-only requantization arithmetic.

Values are carried as unsigned 8-bit integers under an affine mapping

    real = scale * (q - zero_point)

with one (scale, zero_point) pair per tensor.  Accumulators are 32-bit
signed; rescaling an accumulator back to 8 bits goes through a fixed-point
multiplier (a 31-bit normalized fraction plus a right shift) so that the
whole inference path touches no floating point.

Rounding is half-away-from-zero everywhere.  This is a deliberate, single
documented choice: it makes the integer path bit-reproducible across
platforms and backends.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

UINT8_MIN = 0
UINT8_MAX = 255
INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1

# Accumulators hold 32-bit values but are carried in int64 so overflow can be
# detected after the fact.  "check" raises, "saturate" clamps silently.
_OVERFLOW_MODE = os.environ.get("MASKEDGE_OVERFLOW", "saturate")


class QuantizationError(ValueError):
    """Invalid quantization parameters or an ill-conditioned multiplier."""


class AccumulatorOverflowError(ArithmeticError):
    """A 32-bit accumulator overflowed while overflow checking was enabled."""


def set_overflow_mode(mode: str) -> None:
    """Select accumulator overflow handling: "saturate" or "check"."""
    global _OVERFLOW_MODE
    if mode not in ("saturate", "check"):
        raise ValueError(f"unknown overflow mode {mode!r}")
    _OVERFLOW_MODE = mode


def overflow_mode() -> str:
    return _OVERFLOW_MODE


def round_half_away(x):
    """Round to nearest integer, ties away from zero.

    numpy's round() rounds ties to even, so it cannot be used on the
    quantization path.  Accepts scalars or arrays; returns float values.
    """
    arr = np.asarray(x, dtype=np.float64)
    out = np.where(arr >= 0.0, np.floor(arr + 0.5), np.ceil(arr - 0.5))
    if np.ndim(x) == 0 and not isinstance(x, np.ndarray):
        return float(out)
    return out


@dataclass(frozen=True)
class QuantParams:
    """Affine quantization parameters: real = scale * (q - zero_point)."""

    scale: float
    zero_point: int

    def __post_init__(self):
        if not (isinstance(self.scale, float) or isinstance(self.scale, int)):
            raise QuantizationError(f"scale must be a real number, got {type(self.scale).__name__}")
        if not (math.isfinite(self.scale) and self.scale > 0.0):
            raise QuantizationError(f"scale must be positive and finite, got {self.scale!r}")
        zp = self.zero_point
        if not isinstance(zp, (int, np.integer)) or isinstance(zp, bool):
            raise QuantizationError(f"zero_point must be an integer, got {zp!r}")
        if not (UINT8_MIN <= zp <= UINT8_MAX):
            raise QuantizationError(f"zero_point {zp} outside [0, 255]")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "zero_point", int(zp))


@dataclass(frozen=True)
class QTensor:
    """An 8-bit quantized tensor (NHWC layout for activations).

    The backing array is frozen after construction; QTensors may be shared
    freely between threads.
    """

    array: np.ndarray
    qparams: QuantParams

    def __post_init__(self):
        arr = np.asarray(self.array)
        if arr.dtype != np.uint8:
            raise QuantizationError(f"QTensor data must be uint8, got {arr.dtype}")
        if arr.flags.writeable:
            arr = arr.copy()
            arr.setflags(write=False)
        object.__setattr__(self, "array", arr)

    @property
    def shape(self) -> tuple:
        return self.array.shape

    def dequantize(self) -> np.ndarray:
        """Recover real values as float64."""
        return dequantize(self.array, self.qparams)


@dataclass(frozen=True)
class FTensor:
    """Float32 tensor: the reference path mirroring the quantized engine."""

    array: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.array, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise QuantizationError("FTensor data must be finite")
        if arr.flags.writeable:
            arr = arr.copy()
            arr.setflags(write=False)
        object.__setattr__(self, "array", arr)

    @property
    def shape(self) -> tuple:
        return self.array.shape


@dataclass(frozen=True)
class FixedPointMultiplier:
    """Integer realization of a real multiplier in (0, 1).

    The multiplier is m0 * 2**-31 * 2**-right_shift with m0 * 2**-31 kept in
    [0.5, 1).  This is the scale ratio S_in * S_w / S_out of a quantized
    layer, expressed so requantization needs only integer multiplies and
    shifts.
    """

    m0: int
    right_shift: int

    def __post_init__(self):
        if not ((1 << 30) <= self.m0 <= (1 << 31) - 1):
            raise QuantizationError(f"m0 {self.m0} does not encode a fraction in [0.5, 1)")
        if not (0 <= self.right_shift < 64):
            raise QuantizationError(f"right_shift {self.right_shift} out of range")

    @property
    def value(self) -> float:
        """Reconstructed real multiplier (for oracles and diagnostics only)."""
        return self.m0 * 2.0**-31 * 2.0**-self.right_shift


def quantize(x, qp: QuantParams):
    """Map real values to uint8: clamp(round(x / scale) + zero_point, 0, 255).

    Saturates at the range ends; never raises.  Scalars in, scalar int out;
    arrays in, uint8 array out.
    """
    scalar = np.ndim(x) == 0 and not isinstance(x, np.ndarray)
    q = round_half_away(np.asarray(x, dtype=np.float64) / qp.scale) + qp.zero_point
    q = np.clip(q, UINT8_MIN, UINT8_MAX)
    if scalar:
        return int(q)
    return q.astype(np.uint8)


def dequantize(q, qp: QuantParams):
    """Inverse affine map: scale * (q - zero_point), in float64."""
    scalar = np.ndim(q) == 0 and not isinstance(q, np.ndarray)
    r = qp.scale * (np.asarray(q, dtype=np.float64) - qp.zero_point)
    if scalar:
        return float(r)
    return r


def compute_multiplier(m: float) -> FixedPointMultiplier:
    """Decompose a real multiplier in (0, 1) into (m0, right_shift).

    The reconstruction m0 * 2**-31 * 2**-right_shift is within 2**-31 of m.
    Raises QuantizationError outside (0, 1): that signals ill-conditioned
    layer scales rather than a representable multiplier.
    """
    if not (isinstance(m, (int, float)) and math.isfinite(m)):
        raise QuantizationError(f"multiplier must be finite, got {m!r}")
    if not (0.0 < m < 1.0):
        raise QuantizationError(f"multiplier {m!r} outside (0, 1): layer scales are ill-conditioned")
    mant, exp = math.frexp(m)  # m == mant * 2**exp, mant in [0.5, 1), exp <= 0
    m0 = int(math.floor(mant * (1 << 31) + 0.5))
    if m0 == (1 << 31):  # mant rounded up to 1.0; stay on the [0.5, 1) grid
        m0 = (1 << 31) - 1
    return FixedPointMultiplier(m0=m0, right_shift=-exp)


def saturating_rounding_high_mul(a: int, b: int) -> int:
    """High 32 bits of the doubled 64-bit product, rounding half away from zero.

    Computes round(a * b * 2**-31) in pure integer arithmetic, saturating to
    INT32_MAX on the single overflowing input pair.
    """
    ab = int(a) * int(b)
    nudge = (1 << 30) if ab >= 0 else -(1 << 30)
    num = ab + nudge
    # Truncating division toward zero, as a plain shift of the magnitude.
    q = abs(num) >> 31
    result = q if num >= 0 else -q
    if result > INT32_MAX:
        return INT32_MAX
    if result < INT32_MIN:
        return INT32_MIN
    return result


def rounding_right_shift(x: int, exponent: int) -> int:
    """Divide by 2**exponent rounding half away from zero (integer only)."""
    if exponent == 0:
        return int(x)
    x = int(x)
    mask = (1 << exponent) - 1
    remainder = x & mask
    threshold = (mask >> 1) + (1 if x < 0 else 0)
    return (x >> exponent) + (1 if remainder > threshold else 0)


def requantize(acc: int, fpm: FixedPointMultiplier, out_zp: int) -> int:
    """Rescale a 32-bit accumulator to an output quantum.

    clamp(round_fixed(acc * fpm) + out_zp, 0, 255) where round_fixed is the
    saturating high-half multiply followed by the rounding right shift.
    Integer arithmetic only; saturates instead of raising.
    """
    scaled = rounding_right_shift(saturating_rounding_high_mul(acc, fpm.m0), fpm.right_shift)
    q = scaled + int(out_zp)
    return max(UINT8_MIN, min(UINT8_MAX, q))


def _srdhm_array(acc: np.ndarray, m0: int) -> np.ndarray:
    """Vectorized saturating_rounding_high_mul over an int64 accumulator array."""
    ab = acc.astype(np.int64) * np.int64(m0)
    nudge = np.where(ab >= 0, np.int64(1 << 30), np.int64(-(1 << 30)))
    num = ab + nudge
    q = np.abs(num) >> np.int64(31)
    out = np.where(num >= 0, q, -q)
    return np.clip(out, INT32_MIN, INT32_MAX)


def _rrs_array(x: np.ndarray, exponent: int) -> np.ndarray:
    """Vectorized rounding_right_shift over int64 arrays."""
    if exponent == 0:
        return x
    mask = np.int64((1 << exponent) - 1)
    remainder = np.bitwise_and(x, mask)
    threshold = (mask >> np.int64(1)) + (x < 0).astype(np.int64)
    return (x >> np.int64(exponent)) + (remainder > threshold).astype(np.int64)


def requantize_array(
    acc: np.ndarray,
    fpm: FixedPointMultiplier,
    out_zp: int,
    act_min: int = UINT8_MIN,
    act_max: int = UINT8_MAX,
) -> np.ndarray:
    """Array form of requantize() with a fused activation clamp window."""
    scaled = _rrs_array(_srdhm_array(acc, fpm.m0), fpm.right_shift)
    q = scaled + np.int64(out_zp)
    return np.clip(q, act_min, act_max).astype(np.uint8)


def fit_accumulator(acc: np.ndarray) -> np.ndarray:
    """Enforce 32-bit accumulator semantics on an int64 carrier array.

    In "check" mode an out-of-range mathematical sum raises; in "saturate"
    mode it clamps to the int32 range.
    """
    if _OVERFLOW_MODE == "check":
        bad = (acc > INT32_MAX) | (acc < INT32_MIN)
        if bad.any():
            worst = int(acc.flat[int(np.argmax(np.abs(acc)))])
            raise AccumulatorOverflowError(f"32-bit accumulator overflow (value {worst})")
        return acc
    return np.clip(acc, INT32_MIN, INT32_MAX)
