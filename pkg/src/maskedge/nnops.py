"""Neural-network operators in two parallel implementations.

Every operator runs either on FTensor (the float reference path) or on
QTensor (the integer-only path).  The quantized path follows the affine
scheme end to end: convolutions accumulate (q_in - zp_in) * (q_w - zp_w) in
32 bits, add an int32 bias stored at scale S_in * S_w, and requantize through
a fixed-point multiplier.  Dropout never appears here: it is a train-time
regularizer and is an identity at inference.

'same' padding pads with the input zero_point, i.e. the exact quantized
representation of real zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import audit, kernels
from .qtensor import (
    FTensor,
    QTensor,
    QuantizationError,
    QuantParams,
    compute_multiplier,
    quantize,
)

_ACTIVATIONS = ("none", "relu", "relu6")


@dataclass(frozen=True)
class ConvSpec:
    """Static attributes of a convolution."""

    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: str = "same"
    depthwise: bool = False
    fused_activation: str = "none"

    def __post_init__(self):
        kh, kw = self.kernel
        sh, sw = self.stride
        if kh < 1 or kw < 1 or sh < 1 or sw < 1:
            raise ValueError("kernel and stride must be positive")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {self.padding!r}")
        if self.fused_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.fused_activation!r}")


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """TF-convention SAME padding amounts (before, after) for one axis."""
    out = -(-size // stride)  # ceil division
    total = max((out - 1) * stride + kernel - size, 0)
    before = total // 2
    return before, total - before


def _act_window_q(activation: str, out_qp: QuantParams) -> tuple[int, int]:
    if activation == "relu6":
        return out_qp.zero_point, quantize(6.0, out_qp)
    if activation == "relu":
        return out_qp.zero_point, 255
    return 0, 255


def _act_window_f(activation: str) -> tuple[float, float]:
    if activation == "relu6":
        return 0.0, 6.0
    if activation == "relu":
        return 0.0, np.inf
    return -np.inf, np.inf


def _pad_input(arr: np.ndarray, spec: ConvSpec, fill) -> np.ndarray:
    if spec.padding == "valid":
        return arr
    _, h, w, _ = arr.shape
    pt, pb = same_padding(h, spec.kernel[0], spec.stride[0])
    pl, pr = same_padding(w, spec.kernel[1], spec.stride[1])
    if pt == pb == pl == pr == 0:
        return arr
    return np.pad(arr, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=fill)


@dataclass(frozen=True)
class PreparedConv:
    """Per-layer constants hoisted out of the per-image path.

    A graph runner computes these once per op (multiplier decomposition,
    folded epilogue constant, activation clamp window, upcast float weights)
    and passes them back into conv2d on every image.
    """

    fpm: object = None
    const: np.ndarray | None = None
    act_min: object = None
    act_max: object = None
    weights64: np.ndarray | None = None
    bias64: np.ndarray | None = None


def prepare_conv(x_qp, weights, bias, spec: ConvSpec, out_qp: QuantParams | None) -> PreparedConv:
    """Precompute the constants conv2d needs on the given path."""
    if isinstance(weights, QTensor):
        fpm = compute_multiplier(x_qp.scale * weights.qparams.scale / out_qp.scale)
        act_min, act_max = _act_window_q(spec.fused_activation, out_qp)
        const = kernels.folded_const(weights.array, bias, x_qp.zero_point,
                                     weights.qparams.zero_point, spec.depthwise)
        return PreparedConv(fpm=fpm, const=const, act_min=act_min, act_max=act_max)
    act_min, act_max = _act_window_f(spec.fused_activation)
    return PreparedConv(act_min=act_min, act_max=act_max,
                        weights64=weights.array.astype(np.float64),
                        bias64=np.asarray(bias, dtype=np.float64))


def conv2d(x, weights, bias, spec: ConvSpec, out_qp: QuantParams | None = None,
           prepared: PreparedConv | None = None):
    """2-D cross-correlation, full or depthwise, on either path.

    Quantized: x and weights are QTensors, bias is int32 at scale
    S_in * S_w, and out_qp gives the output quantization.  Float: x and
    weights are FTensors and bias is a float vector.
    """
    kh, kw = spec.kernel
    if weights.array.ndim != 4 or weights.array.shape[:2] != (kh, kw):
        raise ValueError(f"weight shape {weights.array.shape} does not match kernel {spec.kernel}")
    if x.array.ndim != 4:
        raise ValueError(f"conv2d input must be 4-d NHWC, got shape {x.array.shape}")
    ci = x.array.shape[3]
    if spec.depthwise:
        if weights.array.shape[2] != ci:
            raise ValueError(f"depthwise weights expect {weights.array.shape[2]} channels, input has {ci}")
    elif weights.array.shape[2] != ci:
        raise ValueError(f"weights expect {weights.array.shape[2]} input channels, input has {ci}")
    out_channels = weights.array.shape[2] * weights.array.shape[3] if spec.depthwise else weights.array.shape[3]

    if isinstance(x, QTensor):
        if not isinstance(weights, QTensor) or out_qp is None:
            raise QuantizationError("quantized conv2d requires quantized weights and output qparams")
        if bias is None:
            bias = np.zeros(out_channels, dtype=np.int32)
        bias = np.asarray(bias)
        if bias.dtype != np.int32:
            raise QuantizationError("quantized conv2d requires an int32 bias")
        if bias.shape != (out_channels,):
            raise ValueError(f"bias shape {bias.shape} does not match {out_channels} output channels")
        if prepared is None:
            prepared = prepare_conv(x.qparams, weights, bias, spec, out_qp)
        padded = _pad_input(x.array, spec, x.qparams.zero_point)
        fn = kernels.dwconv2d_qu8 if spec.depthwise else kernels.conv2d_qu8
        out = fn(padded, weights.array, bias, spec.stride,
                 x.qparams.zero_point, weights.qparams.zero_point,
                 prepared.fpm, out_qp.zero_point, prepared.act_min, prepared.act_max,
                 const=prepared.const)
        return QTensor(out, out_qp)

    if not isinstance(weights, FTensor):
        raise ValueError("float conv2d requires float weights")
    if bias is None:
        bias = np.zeros(out_channels, dtype=np.float64)
    if np.asarray(bias).shape != (out_channels,):
        raise ValueError(f"bias shape {np.asarray(bias).shape} does not match {out_channels} output channels")
    if prepared is None:
        prepared = prepare_conv(None, weights, bias, spec, None)
    padded = _pad_input(x.array.astype(np.float64), spec, 0.0)
    fn = kernels.dwconv2d_f if spec.depthwise else kernels.conv2d_f
    out = fn(padded, prepared.weights64, prepared.bias64, spec.stride,
             prepared.act_min, prepared.act_max)
    return FTensor(out.astype(np.float32))


def residual_add(a, b, out_qp: QuantParams | None = None):
    """Elementwise add; on the quantized path the sum is requantized.

    Uses the standard integer-add scheme: both inputs are rescaled onto a
    shared grid 2**20 finer than the larger input scale, summed, then
    requantized to out_qp.
    """
    if a.array.shape != b.array.shape:
        raise ValueError(f"add shape mismatch: {a.array.shape} vs {b.array.shape}")
    if isinstance(a, QTensor):
        if not isinstance(b, QTensor):
            raise QuantizationError("cannot add quantized and float tensors")
        if out_qp is None:
            raise QuantizationError("quantized residual_add requires output qparams")
        left_shift = 20
        sa, sb, so = a.qparams.scale, b.qparams.scale, out_qp.scale
        twice_max = 2.0 * max(sa, sb)
        fa = compute_multiplier(sa / twice_max)
        fb = compute_multiplier(sb / twice_max)
        fo = compute_multiplier(twice_max / ((1 << left_shift) * so))
        out = kernels.add_qu8(a.array, b.array, a.qparams.zero_point, b.qparams.zero_point,
                              fa, fb, fo, out_qp.zero_point, 0, 255)
        return QTensor(out, out_qp)
    return FTensor(a.array + b.array)


def inverted_residual(x, expand_weights, depthwise_weights, project_weights, biases,
                      stride: int, out_qps=None):
    """MobileNetV2 block: expand 1x1 + relu6, depthwise 3x3 + relu6, linear
    project 1x1, with a residual add when stride is 1 and channel counts match.

    biases is the (expand, depthwise, project) triple.  On the quantized path
    out_qps supplies the three stage output qparams, plus an optional fourth
    entry for the requantized residual sum (defaults to the projection's).
    """
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    quantized = isinstance(x, QTensor)
    if quantized:
        if out_qps is None or len(out_qps) not in (3, 4):
            raise QuantizationError("quantized inverted_residual requires 3 or 4 stage qparams")
        expand_qp, depth_qp, project_qp = out_qps[:3]
        add_qp = out_qps[3] if len(out_qps) == 4 else project_qp
    else:
        expand_qp = depth_qp = project_qp = add_qp = None

    eb, db, pb = biases
    h = conv2d(x, expand_weights, eb,
               ConvSpec(kernel=(1, 1), fused_activation="relu6"), expand_qp)
    h = conv2d(h, depthwise_weights, db,
               ConvSpec(kernel=(3, 3), stride=(stride, stride), depthwise=True,
                        fused_activation="relu6"), depth_qp)
    h = conv2d(h, project_weights, pb, ConvSpec(kernel=(1, 1)), project_qp)
    if stride == 1 and h.array.shape[3] == x.array.shape[3]:
        return residual_add(x, h, add_qp)
    return h


def avg_pool2d(x, out_qp: QuantParams | None = None):
    """Global spatial average pooling.

    Quantized path: integer channel sums with a rounded division, staying at
    the input qparams; if out_qp differs, the mean is requantized (only scale
    ratios below 1 are representable).
    """
    if x.array.ndim != 4:
        raise ValueError(f"avg_pool2d input must be 4-d NHWC, got shape {x.array.shape}")
    n, h, w, c = x.array.shape
    if h < 1 or w < 1:
        raise ValueError("avg_pool2d needs at least one spatial element")
    if isinstance(x, QTensor):
        count = h * w
        sums = x.array.astype(np.int64).sum(axis=(1, 2), keepdims=True)
        audit.record_array("avg_pool.sums", sums)
        mean = (2 * sums + count) // (2 * count)  # round half away; sums >= 0
        if out_qp is None or out_qp == x.qparams:
            out = mean.astype(np.uint8)
            audit.record_array("avg_pool.output", out)
            return QTensor(out, x.qparams)
        fpm = compute_multiplier(x.qparams.scale / out_qp.scale)
        acc = fit_accumulator(mean - x.qparams.zero_point)
        q = _rrs_array(_srdhm_array(acc, fpm.m0), fpm.right_shift) + out_qp.zero_point
        out = np.clip(q, 0, 255).astype(np.uint8)
        audit.record_array("avg_pool.output", out)
        return QTensor(out, out_qp)
    return FTensor(x.array.astype(np.float64).mean(axis=(1, 2), keepdims=True).astype(np.float32))


def dense(x, weights, bias, activation: str = "none", out_qp: QuantParams | None = None,
          prepared: PreparedConv | None = None):
    """Fully connected layer over (batch, features) inputs.

    The quantized path runs as the 1x1-convolution equivalent, so it shares
    the conv accumulator and requantization machinery.
    """
    if activation not in ("none", "relu"):
        raise ValueError(f"dense activation must be none or relu, got {activation!r}")
    if x.array.ndim != 2:
        raise ValueError(f"dense input must be 2-d (batch, features), got shape {x.array.shape}")
    if weights.array.ndim != 2:
        raise ValueError(f"dense weights must be 2-d (features, units), got shape {weights.array.shape}")
    batch, feat = x.array.shape
    if weights.array.shape[0] != feat:
        raise ValueError(f"dense weights expect {weights.array.shape[0]} features, input has {feat}")
    units = weights.array.shape[1]
    if isinstance(x, QTensor):
        x4 = QTensor(np.ascontiguousarray(x.array.reshape(batch, 1, 1, feat)), x.qparams)
        w4 = QTensor(np.ascontiguousarray(weights.array.reshape(1, 1, feat, units)), weights.qparams)
        spec = ConvSpec(kernel=(1, 1), padding="valid", fused_activation=activation)
        out = conv2d(x4, w4, bias, spec, out_qp, prepared=prepared)
        return QTensor(out.array.reshape(batch, units), out.qparams)
    out = x.array.astype(np.float64) @ weights.array.astype(np.float64)
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)
    if activation == "relu":
        out = np.maximum(out, 0.0)
    return FTensor(out.astype(np.float32))


def relu6(x):
    """clamp(x, 0, 6); the quantized path clamps to the representations of 0 and 6."""
    if isinstance(x, QTensor):
        lo = x.qparams.zero_point
        hi = quantize(6.0, x.qparams)
        out = np.clip(x.array, lo, hi)
        audit.record_array("relu6.output", out)
        return QTensor(out, x.qparams)
    return FTensor(np.clip(x.array, 0.0, 6.0))


def sigmoid_scores(logits: FTensor) -> FTensor:
    """Elementwise logistic function over float logits."""
    if not isinstance(logits, FTensor):
        raise TypeError("sigmoid_scores operates on the float path only")
    x = logits.array.astype(np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return FTensor(out.astype(np.float32))


def softmax_scores(logits: FTensor) -> FTensor:
    """Row-wise softmax (last axis) over float logits."""
    if not isinstance(logits, FTensor):
        raise TypeError("softmax_scores operates on the float path only")
    x = logits.array.astype(np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return FTensor((ex / ex.sum(axis=-1, keepdims=True)).astype(np.float32))
