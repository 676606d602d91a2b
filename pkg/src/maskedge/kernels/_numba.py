"""Numba-compiled convolution kernels (the default hot path).

The quantized kernels use the folded zero-point decomposition

    acc = sum(q_in * q_w) - w_zp * sum(q_in) + const[oc]
    const[oc] = bias[oc] - in_zp * sum(q_w) + k * in_zp * w_zp

so the inner loop is a raw uint8 product accumulation in int32 (the wrapper
guarantees k * 255^2 fits; see kernels.__init__), with the exact 32-bit
accumulator reconstituted in int64 at the epilogue.  Results are bit-identical
to the numpy fallback's direct formulation, and the epilogue requantization
must stay in lockstep with qtensor.saturating_rounding_high_mul /
rounding_right_shift; the test suite asserts both.
"""

from __future__ import annotations

import numpy as np
from numba import njit

INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1


@njit(cache=True, inline="always")
def _fit32(acc, check):
    if acc > INT32_MAX:
        if check:
            raise OverflowError("32-bit accumulator overflow")
        return np.int64(INT32_MAX)
    if acc < INT32_MIN:
        if check:
            raise OverflowError("32-bit accumulator overflow")
        return np.int64(INT32_MIN)
    return acc


@njit(cache=True, inline="always")
def _requant(acc, m0, right_shift, out_zp, act_min, act_max):
    # Saturating high-half multiply, rounding half away from zero.  Written
    # branch-free (sign masks instead of conditionals) so LLVM can keep the
    # surrounding per-output loop vectorized.
    ab = acc * m0
    sign = ab >> 63  # 0 when non-negative, -1 when negative
    nudge = ((np.int64(1) << 30) ^ sign) - sign
    num = ab + nudge
    # truncate toward zero: floor-shift plus a correction on negatives
    scaled = (num >> 31) + (((num >> 63) & 1) & np.int64((num & ((np.int64(1) << 31) - 1)) != 0))
    scaled = min(max(scaled, np.int64(INT32_MIN)), np.int64(INT32_MAX))
    # Rounding right shift, half away from zero.
    if right_shift > 0:
        mask = (np.int64(1) << right_shift) - 1
        remainder = scaled & mask
        threshold = (mask >> 1) + ((scaled >> 63) & 1)
        scaled = (scaled >> right_shift) + np.int64(remainder > threshold)
    q = scaled + out_zp
    return np.uint8(min(max(q, act_min), act_max))


@njit(cache=True)
def conv2d_qu8(inp, weights, const, w_zp, sh, sw, m0, right_shift, out_zp, act_min, act_max, check):
    n, h, w, ci = inp.shape
    kh, kw, _, co = weights.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    out = np.empty((n, oh, ow, co), dtype=np.uint8)
    zw = np.int64(w_zp)
    raw = np.empty(co, dtype=np.int32)
    for b in range(n):
        for oy in range(oh):
            iy = oy * sh
            for ox in range(ow):
                ix = ox * sw
                insum = np.int32(0)
                raw[:] = 0
                # accumulate with oc innermost: weight rows are contiguous
                # over oc, so this is the vectorizable axis
                for dy in range(kh):
                    for dx in range(kw):
                        for c in range(ci):
                            xv = np.int32(inp[b, iy + dy, ix + dx, c])
                            insum += xv
                            for oc in range(co):
                                raw[oc] += xv * np.int32(weights[dy, dx, c, oc])
                for oc in range(co):
                    acc = _fit32(np.int64(raw[oc]) - zw * np.int64(insum) + const[oc], check)
                    out[b, oy, ox, oc] = _requant(acc, m0, right_shift, out_zp, act_min, act_max)
    return out


@njit(cache=True)
def dwconv2d_qu8(inp, weights, const, w_zp, sh, sw, m0, right_shift, out_zp, act_min, act_max, check):
    n, h, w, c = inp.shape
    kh, kw, _, mult = weights.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    out = np.empty((n, oh, ow, c * mult), dtype=np.uint8)
    zw = np.int64(w_zp)
    for b in range(n):
        for oy in range(oh):
            iy = oy * sh
            for ox in range(ow):
                ix = ox * sw
                for ch in range(c):
                    insum = np.int32(0)
                    for m in range(mult):
                        raw = np.int32(0)
                        for dy in range(kh):
                            for dx in range(kw):
                                xv = np.int32(inp[b, iy + dy, ix + dx, ch])
                                if m == 0:
                                    insum += xv
                                raw += xv * np.int32(weights[dy, dx, ch, m])
                        oc = ch * mult + m
                        acc = _fit32(np.int64(raw) - zw * np.int64(insum) + const[oc], check)
                        out[b, oy, ox, oc] = _requant(acc, m0, right_shift, out_zp, act_min, act_max)
    return out


@njit(cache=True)
def add_qu8(a, b, za, zb, m0a, rsa, m0b, rsb, m0o, rso, out_zp, act_min, act_max, check):
    """Quantized elementwise add on the shared 2**20-fine grid."""
    flat_a = a.reshape(-1)
    flat_b = b.reshape(-1)
    out = np.empty(flat_a.size, dtype=np.uint8)
    for i in range(flat_a.size):
        xa = (np.int64(flat_a[i]) - za) << 20
        xb = (np.int64(flat_b[i]) - zb) << 20
        ra = _requant_to_int(xa, m0a, rsa)
        rb = _requant_to_int(xb, m0b, rsb)
        acc = _fit32(ra + rb, check)
        out[i] = _requant(acc, m0o, rso, out_zp, act_min, act_max)
    return out.reshape(a.shape)


@njit(cache=True, inline="always")
def _requant_to_int(acc, m0, right_shift):
    # _requant without the zero point and clamp window: used for the add
    # operands, which stay as int32 intermediates
    ab = acc * m0
    sign = ab >> 63
    nudge = ((np.int64(1) << 30) ^ sign) - sign
    num = ab + nudge
    scaled = (num >> 31) + (((num >> 63) & 1) & np.int64((num & ((np.int64(1) << 31) - 1)) != 0))
    scaled = min(max(scaled, np.int64(INT32_MIN)), np.int64(INT32_MAX))
    if right_shift > 0:
        mask = (np.int64(1) << right_shift) - 1
        remainder = scaled & mask
        threshold = (mask >> 1) + ((scaled >> 63) & 1)
        scaled = (scaled >> right_shift) + np.int64(remainder > threshold)
    return scaled


@njit(cache=True)
def conv2d_f(inp, weights, bias, sh, sw, act_min, act_max):
    n, h, w, ci = inp.shape
    kh, kw, _, co = weights.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    out = np.empty((n, oh, ow, co), dtype=np.float64)
    for b in range(n):
        for oy in range(oh):
            iy = oy * sh
            for ox in range(ow):
                ix = ox * sw
                for oc in range(co):
                    acc = 0.0
                    for dy in range(kh):
                        for dx in range(kw):
                            for c in range(ci):
                                acc += inp[b, iy + dy, ix + dx, c] * weights[dy, dx, c, oc]
                    acc += bias[oc]
                    if acc < act_min:
                        acc = act_min
                    elif acc > act_max:
                        acc = act_max
                    out[b, oy, ox, oc] = acc
    return out


@njit(cache=True)
def dwconv2d_f(inp, weights, bias, sh, sw, act_min, act_max):
    n, h, w, c = inp.shape
    kh, kw, _, mult = weights.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    out = np.empty((n, oh, ow, c * mult), dtype=np.float64)
    for b in range(n):
        for oy in range(oh):
            iy = oy * sh
            for ox in range(ow):
                ix = ox * sw
                for ch in range(c):
                    for m in range(mult):
                        acc = 0.0
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += inp[b, iy + dy, ix + dx, ch] * weights[dy, dx, ch, m]
                        oc = ch * mult + m
                        acc += bias[oc]
                        if acc < act_min:
                            acc = act_min
                        elif acc > act_max:
                            acc = act_max
                        out[b, oy, ox, oc] = acc
    return out
