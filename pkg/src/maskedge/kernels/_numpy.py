"""Pure-numpy convolution kernels: the fallback when numba is unavailable.

All quantized kernels take pre-padded uint8 inputs and produce uint8 outputs,
accumulating in int64 (32-bit accumulator semantics are enforced by
qtensor.fit_accumulator).  Float kernels accumulate in float64 for
oracle-grade accuracy and are returned as float64; the operator layer casts
back to float32 storage.
"""

from __future__ import annotations

import numpy as np

from .. import audit
from ..qtensor import FixedPointMultiplier, fit_accumulator, requantize_array


def conv2d_qu8(inp, weights, bias, stride, in_zp, w_zp, fpm, out_zp, act_min, act_max):
    """Full convolution. inp (N,H,W,Ci) padded uint8, weights (kh,kw,Ci,Co)."""
    n, h, w, ci = inp.shape
    kh, kw, _, co = weights.shape
    sh, sw = stride
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    x = inp.astype(np.int64) - np.int64(in_zp)
    wt = weights.astype(np.int64) - np.int64(w_zp)
    audit.record_array("conv2d.input_offset", x)
    audit.record_array("conv2d.weight_offset", wt)
    acc = np.zeros((n * oh * ow, co), dtype=np.int64)
    for dy in range(kh):
        for dx in range(kw):
            patch = x[:, dy : dy + sh * oh : sh, dx : dx + sw * ow : sw, :]
            acc += patch.reshape(n * oh * ow, ci) @ wt[dy, dx]
    acc += bias.astype(np.int64)
    audit.record_array("conv2d.accumulator", acc)
    acc = fit_accumulator(acc)
    out = requantize_array(acc, fpm, out_zp, act_min, act_max).reshape(n, oh, ow, co)
    audit.record_array("conv2d.output", out)
    return out


def dwconv2d_qu8(inp, weights, bias, stride, in_zp, w_zp, fpm, out_zp, act_min, act_max):
    """Depthwise convolution. weights (kh,kw,C,mult); output channels C*mult."""
    n, h, w, c = inp.shape
    kh, kw, _, mult = weights.shape
    sh, sw = stride
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    x = inp.astype(np.int64) - np.int64(in_zp)
    wt = weights.astype(np.int64) - np.int64(w_zp)
    audit.record_array("dwconv2d.input_offset", x)
    audit.record_array("dwconv2d.weight_offset", wt)
    acc = np.zeros((n, oh, ow, c, mult), dtype=np.int64)
    for dy in range(kh):
        for dx in range(kw):
            patch = x[:, dy : dy + sh * oh : sh, dx : dx + sw * ow : sw, :]
            acc += patch[..., None] * wt[dy, dx]
    acc = acc.reshape(n, oh, ow, c * mult) + bias.astype(np.int64)
    audit.record_array("dwconv2d.accumulator", acc)
    acc = fit_accumulator(acc)
    out = requantize_array(acc, fpm, out_zp, act_min, act_max)
    audit.record_array("dwconv2d.output", out)
    return out


def add_qu8(a, b, za, zb, fpma, fpmb, fpmo, out_zp, act_min, act_max):
    """Quantized elementwise add: rescale both operands onto a grid 2**20
    finer than the larger input scale, sum, then requantize."""
    from ..qtensor import _rrs_array, _srdhm_array

    xa = (a.astype(np.int64) - za) << 20
    xb = (b.astype(np.int64) - zb) << 20
    audit.record_array("add.lhs", xa)
    audit.record_array("add.rhs", xb)
    ra = _rrs_array(_srdhm_array(xa, fpma.m0), fpma.right_shift)
    rb = _rrs_array(_srdhm_array(xb, fpmb.m0), fpmb.right_shift)
    raw = fit_accumulator(ra + rb)
    audit.record_array("add.sum", raw)
    out = requantize_array(raw, fpmo, out_zp, act_min, act_max)
    audit.record_array("add.output", out)
    return out


def conv2d_f(inp, weights, bias, stride, act_min, act_max):
    """Float reference convolution; float64 in, float64 out."""
    n, h, w, ci = inp.shape
    kh, kw, _, co = weights.shape
    sh, sw = stride
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    acc = np.zeros((n * oh * ow, co), dtype=np.float64)
    for dy in range(kh):
        for dx in range(kw):
            patch = inp[:, dy : dy + sh * oh : sh, dx : dx + sw * ow : sw, :]
            acc += patch.reshape(n * oh * ow, ci) @ weights[dy, dx]
    acc += bias
    return np.clip(acc, act_min, act_max).reshape(n, oh, ow, co)


def dwconv2d_f(inp, weights, bias, stride, act_min, act_max):
    n, h, w, c = inp.shape
    kh, kw, _, mult = weights.shape
    sh, sw = stride
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    acc = np.zeros((n, oh, ow, c, mult), dtype=np.float64)
    for dy in range(kh):
        for dx in range(kw):
            patch = inp[:, dy : dy + sh * oh : sh, dx : dx + sw * ow : sw, :]
            acc += patch[..., None] * weights[dy, dx]
    acc = acc.reshape(n, oh, ow, c * mult) + bias
    return np.clip(acc, act_min, act_max)


__all__ = ["conv2d_qu8", "dwconv2d_qu8", "add_qu8", "conv2d_f", "dwconv2d_f"]
