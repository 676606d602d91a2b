"""Backend dispatch for the hot convolution kernels.

Two interchangeable backends exist: numba-compiled loops (default when numba
imports) and a pure-numpy fallback.  Selection comes from the
MASKEDGE_BACKEND environment variable ("auto", "numba", "numpy") and can be
overridden at runtime with set_backend(), which the backend benchmark and the
equivalence tests rely on.

Quantized kernels are bit-identical across backends; float kernels may differ
in the last ulps because summation order differs.  The numba quantized
kernels accumulate raw uint8 products in int32, which is exact only while
k * 255^2 fits in 31 bits (k = accumulation depth); larger convolutions fall
back to the numpy int64 path automatically.
"""

from __future__ import annotations

import os

import numpy as np

from .. import audit
from ..qtensor import AccumulatorOverflowError, FixedPointMultiplier, overflow_mode
from . import _numpy

try:
    from . import _numba

    _NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    _numba = None
    _NUMBA_AVAILABLE = False

# Accumulation depth where raw int32 uint8-product sums could overflow.
_MAX_INT32_DEPTH = (1 << 31) // (255 * 255) - 1


def _resolve(name: str) -> str:
    if name == "auto":
        return "numba" if _NUMBA_AVAILABLE else "numpy"
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r} (expected auto, numba or numpy)")
    if name == "numba" and not _NUMBA_AVAILABLE:
        raise ValueError("numba backend requested but numba is not importable")
    return name


_BACKEND = _resolve(os.environ.get("MASKEDGE_BACKEND", "auto"))


def backend_name() -> str:
    return _BACKEND


def available_backends() -> tuple[str, ...]:
    return ("numba", "numpy") if _NUMBA_AVAILABLE else ("numpy",)


def set_backend(name: str) -> str:
    """Switch kernel backend; returns the previously active one."""
    global _BACKEND
    prev = _BACKEND
    _BACKEND = _resolve(name)
    return prev


def folded_const(weights: np.ndarray, bias: np.ndarray, in_zp: int, w_zp: int,
                 depthwise: bool) -> np.ndarray:
    """Per-output-channel epilogue constant for the zero-point folding."""
    if depthwise:
        kh, kw, c, mult = weights.shape
        k = kh * kw
        wsum = weights.astype(np.int64).sum(axis=(0, 1)).reshape(c * mult)
    else:
        kh, kw, ci, co = weights.shape
        k = kh * kw * ci
        wsum = weights.astype(np.int64).sum(axis=(0, 1, 2))
    return bias.astype(np.int64) - in_zp * wsum + k * in_zp * w_zp


def conv2d_qu8(inp, weights, bias, stride, in_zp, w_zp, fpm: FixedPointMultiplier,
               out_zp, act_min, act_max, const=None):
    depth = weights.shape[0] * weights.shape[1] * weights.shape[2]
    if _BACKEND == "numba" and depth <= _MAX_INT32_DEPTH:
        audit.record_array("conv2d.input", inp)
        audit.record_array("conv2d.weights", weights)
        audit.record_array("conv2d.bias", bias)
        if const is None:
            const = folded_const(weights, bias, in_zp, w_zp, depthwise=False)
        try:
            out = _numba.conv2d_qu8(
                inp, weights, const, w_zp, stride[0], stride[1],
                fpm.m0, fpm.right_shift, out_zp, act_min, act_max,
                overflow_mode() == "check",
            )
        except OverflowError as exc:
            raise AccumulatorOverflowError(str(exc)) from None
        audit.record_array("conv2d.output", out)
        return out
    return _numpy.conv2d_qu8(inp, weights, bias, stride, in_zp, w_zp, fpm, out_zp, act_min, act_max)


def dwconv2d_qu8(inp, weights, bias, stride, in_zp, w_zp, fpm: FixedPointMultiplier,
                 out_zp, act_min, act_max, const=None):
    depth = weights.shape[0] * weights.shape[1]
    if _BACKEND == "numba" and depth <= _MAX_INT32_DEPTH:
        audit.record_array("dwconv2d.input", inp)
        audit.record_array("dwconv2d.weights", weights)
        audit.record_array("dwconv2d.bias", bias)
        if const is None:
            const = folded_const(weights, bias, in_zp, w_zp, depthwise=True)
        try:
            out = _numba.dwconv2d_qu8(
                inp, weights, const, w_zp, stride[0], stride[1],
                fpm.m0, fpm.right_shift, out_zp, act_min, act_max,
                overflow_mode() == "check",
            )
        except OverflowError as exc:
            raise AccumulatorOverflowError(str(exc)) from None
        audit.record_array("dwconv2d.output", out)
        return out
    return _numpy.dwconv2d_qu8(inp, weights, bias, stride, in_zp, w_zp, fpm, out_zp, act_min, act_max)


def add_qu8(a, b, za, zb, fpma, fpmb, fpmo, out_zp, act_min, act_max):
    if _BACKEND == "numba":
        audit.record_array("add.lhs", a)
        audit.record_array("add.rhs", b)
        try:
            out = _numba.add_qu8(a, b, za, zb, fpma.m0, fpma.right_shift,
                                 fpmb.m0, fpmb.right_shift, fpmo.m0, fpmo.right_shift,
                                 out_zp, act_min, act_max, overflow_mode() == "check")
        except OverflowError as exc:
            raise AccumulatorOverflowError(str(exc)) from None
        audit.record_array("add.output", out)
        return out
    return _numpy.add_qu8(a, b, za, zb, fpma, fpmb, fpmo, out_zp, act_min, act_max)


def conv2d_f(inp, weights, bias, stride, act_min, act_max):
    if _BACKEND == "numba":
        return _numba.conv2d_f(inp, weights, bias, stride[0], stride[1], act_min, act_max)
    return _numpy.conv2d_f(inp, weights, bias, stride, act_min, act_max)


def dwconv2d_f(inp, weights, bias, stride, act_min, act_max):
    if _BACKEND == "numba":
        return _numba.dwconv2d_f(inp, weights, bias, stride[0], stride[1], act_min, act_max)
    return _numpy.dwconv2d_f(inp, weights, bias, stride, act_min, act_max)


def warmup() -> None:
    """Compile the numba kernels on tiny inputs so timings exclude JIT cost."""
    if not _NUMBA_AVAILABLE:
        return
    from ..qtensor import compute_multiplier

    fpm = compute_multiplier(0.5)
    x = np.full((1, 3, 3, 2), 128, dtype=np.uint8)
    w = np.full((3, 3, 2, 2), 128, dtype=np.uint8)
    dw = np.full((3, 3, 2, 1), 128, dtype=np.uint8)
    b = np.zeros(2, dtype=np.int32)
    const = folded_const(w, b, 128, 128, depthwise=False)
    dconst = folded_const(dw, b, 128, 128, depthwise=True)
    _numba.conv2d_qu8(x, w, const, 128, 1, 1, fpm.m0, fpm.right_shift, 128, 0, 255, False)
    _numba.dwconv2d_qu8(x, dw, dconst, 128, 1, 1, fpm.m0, fpm.right_shift, 128, 0, 255, False)
    xf = x.astype(np.float64)
    bf = b.astype(np.float64)
    _numba.conv2d_f(xf, w.astype(np.float64), bf, 1, 1, -np.inf, np.inf)
    _numba.dwconv2d_f(xf, dw.astype(np.float64), bf, 1, 1, -np.inf, np.inf)
