"""Deterministic desk-scale fixture models and the synthetic imagery they see.

The fixture detector is a miniature of the deployed architecture: a conv
stem, two inverted-residual blocks, two SSD feature maps (4x4 and 2x2 grids,
3 anchors per location) and per-map box/class heads over a 32x32x3 input.
Weights come from a seeded xorshift64* generator (algorithm below), so the
same seed always yields bit-identical graphs on every platform.

The quantized variant is derived from the float fixture by post-training
calibration: weight ranges from exact per-tensor min/max, activation ranges
from a 16-image seeded calibration batch, biases as int32 at scale
S_in * S_w.

Synthetic images are noise with one bright square blob.  Class-head weights
are drawn non-negative and head biases carry a fixed slot/map hierarchy, so
the blob's grid cell wins the score ranking by a wide margin; that keeps the
float-vs-quantized top-1 comparison far away from tie-break noise, the way a
confident detection behaves in the full-size network.

xorshift64*: state ^= state >> 12; state ^= state << 25; state ^= state >> 27;
output = state * 0x2545F4914F6CDD1D (all mod 2**64).  Uniform doubles take
the top 53 bits / 2**53.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .graphexec import execute_graph
from .model import GraphOp, GraphTensor, ModelGraph
from .nnops import same_padding
from .pipeline import Image, normalize_pixels
from .postproc import AnchorConfig, FeatureMapSpec
from .qtensor import INT32_MAX, INT32_MIN, QuantParams, quantize, round_half_away

_U64 = (1 << 64) - 1
_MULT = 0x2545F4914F6CDD1D
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15


class XorShift64Star:
    """Seeded xorshift64* stream; pure-python ints keep it platform exact."""

    def __init__(self, seed: int):
        state = seed & _U64
        if state == 0:
            state = _SPLITMIX_GAMMA
        self._state = state

    def next_u64(self) -> int:
        x = self._state
        x ^= x >> 12
        x ^= (x << 25) & _U64
        x ^= x >> 27
        self._state = x
        return (x * _MULT) & _U64

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * 2.0**-53
        return lo + (hi - lo) * u

    def uniform_array(self, shape, lo: float, hi: float) -> np.ndarray:
        n = int(np.prod(shape))
        return np.array([self.uniform(lo, hi) for _ in range(n)], dtype=np.float64).reshape(shape)

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi)."""
        return lo + self.next_u64() % (hi - lo)


def _mix(*parts: int) -> int:
    """splitmix64 fold of several integers into one 64-bit stream seed."""
    acc = 0x243F6A8885A308D3
    for p in parts:
        acc = (acc + (p & _U64) + _SPLITMIX_GAMMA) & _U64
        acc ^= acc >> 30
        acc = (acc * 0xBF58476D1CE4E5B9) & _U64
        acc ^= acc >> 27
        acc = (acc * 0x94D049BB133111EB) & _U64
        acc ^= acc >> 31
    return acc


# -- synthetic imagery -------------------------------------------------------


def synthetic_image(seed: int, height: int = 32, width: int = 32):
    """Near-neutral noise background plus one bright blob near a seeded 4x4
    cell center.

    The background sits close to the normalization midpoint so the blob is
    the dominant energy source in the image; that is what makes the fixture
    detector's score landscape peak decisively at the blob cell.  Returns
    (uint8 array (h, w, 3), normalized blob box) so datasets built from these
    images have ground truth for free.
    """
    rng = XorShift64Star(_mix(0x1A6E5, seed))
    img = np.empty((height, width, 3), dtype=np.uint8)
    base = rng.uniform_array((height, width), 122.0, 134.0)
    for ch in range(3):
        tint = rng.uniform(-3.0, 3.0)
        img[:, :, ch] = np.clip(base + tint, 0, 255).astype(np.uint8)

    cell = rng.randint(0, 16)
    cy = (cell // 4 + 0.5) / 4.0 + rng.uniform(-0.02, 0.02)
    cx = (cell % 4 + 0.5) / 4.0 + rng.uniform(-0.02, 0.02)
    half = rng.uniform(0.10, 0.14)
    y0 = max(0, int(round_half_away((cy - half) * height)))
    y1 = min(height, int(round_half_away((cy + half) * height)))
    x0 = max(0, int(round_half_away((cx - half) * width)))
    x1 = min(width, int(round_half_away((cx + half) * width)))
    value = rng.uniform(245.0, 255.0)
    img[y0:y1, x0:x1, :] = int(value)
    box = (y0 / height, x0 / width, y1 / height, x1 / width)
    return img, box


def write_synthetic_dataset(directory, count: int, seed: int = 0,
                            image_size: int = 32, split: str = "test") -> Path:
    """Write PNGs plus a matching manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        arr, box = synthetic_image(_mix(seed, i), image_size, image_size)
        name = f"img_{i:04d}.png"
        Image(arr).save(directory / name)
        label = "mask" if i % 2 == 0 else "nomask"
        entries.append({
            "image": name,
            "boxes": [{"label": label, "ymin": box[0], "xmin": box[1],
                       "ymax": box[2], "xmax": box[3]}],
        })
    manifest = directory / "manifest.json"
    manifest.write_text(_manifest_json(split, entries))
    return manifest


def _manifest_json(split: str, entries) -> str:
    import json

    return json.dumps({"split": split, "entries": entries}, indent=2)


# -- graph assembly ----------------------------------------------------------


class _Assembler:
    """Accumulates tensors and ops while tracking activation shapes."""

    def __init__(self):
        self.tensors: list[GraphTensor] = []
        self.ops: list[GraphOp] = []
        self._names: set[str] = set()

    def add(self, tensor: GraphTensor) -> int:
        if tensor.name in self._names:
            raise ValueError(f"duplicate tensor {tensor.name!r}")
        self._names.add(tensor.name)
        self.tensors.append(tensor)
        return len(self.tensors) - 1

    def activation(self, name: str, shape) -> int:
        return self.add(GraphTensor(name=name, dtype="f32", shape=tuple(shape)))

    def weight(self, name: str, data: np.ndarray) -> int:
        return self.add(GraphTensor(name=name, dtype="f32", shape=data.shape,
                                    data=data.astype(np.float32)))

    def conv(self, name: str, x_idx: int, weights: np.ndarray, bias: np.ndarray,
             stride: int = 1, padding: str = "same", activation: str = "none",
             depthwise: bool = False) -> int:
        w_idx = self.weight(f"{name}.weights", weights)
        b_idx = self.weight(f"{name}.bias", bias)
        n, h, w, _ = self.tensors[x_idx].shape
        kh, kw = weights.shape[:2]
        if padding == "same":
            oh, ow = -(-h // stride), -(-w // stride)
        else:
            oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
        co = weights.shape[2] * weights.shape[3] if depthwise else weights.shape[3]
        out_idx = self.activation(f"{name}.out", (n, oh, ow, co))
        self.ops.append(GraphOp(
            opcode="depthwise_conv2d" if depthwise else "conv2d",
            inputs=(x_idx, w_idx, b_idx), outputs=(out_idx,),
            stride=(stride, stride), padding=padding, activation=activation,
        ))
        return out_idx

    def add_op(self, name: str, a_idx: int, b_idx: int) -> int:
        out_idx = self.activation(f"{name}.out", self.tensors[a_idx].shape)
        self.ops.append(GraphOp(opcode="add", inputs=(a_idx, b_idx), outputs=(out_idx,)))
        return out_idx

    def avg_pool(self, name: str, x_idx: int) -> int:
        n, _, _, c = self.tensors[x_idx].shape
        out_idx = self.activation(f"{name}.out", (n, 1, 1, c))
        self.ops.append(GraphOp(opcode="avg_pool2d", inputs=(x_idx,), outputs=(out_idx,)))
        return out_idx

    def flatten(self, name: str, x_idx: int) -> int:
        shape = self.tensors[x_idx].shape
        out_idx = self.activation(f"{name}.out", (shape[0], int(np.prod(shape[1:]))))
        self.ops.append(GraphOp(opcode="flatten", inputs=(x_idx,), outputs=(out_idx,)))
        return out_idx

    def dense(self, name: str, x_idx: int, weights: np.ndarray, bias: np.ndarray,
              activation: str = "none") -> int:
        w_idx = self.weight(f"{name}.weights", weights)
        b_idx = self.weight(f"{name}.bias", bias)
        batch = self.tensors[x_idx].shape[0]
        out_idx = self.activation(f"{name}.out", (batch, weights.shape[1]))
        self.ops.append(GraphOp(opcode="dense", inputs=(x_idx, w_idx, b_idx),
                                outputs=(out_idx,), activation=activation))
        return out_idx


# Weight-generation scheme.  The backbone mimics how a trained compact
# detector behaves rather than a raw random net: stem and depthwise kernels
# are center-heavy (locality-preserving, identity-leaning), pointwise layers
# are plain random mixers, and the feature-map convolutions are disjoint 2x2
# stride-2 pools.  Class heads use small near-uniform positive weights, so a
# cell's logit tracks its feature energy, which peaks decisively at the image
# blob.  The net effect: the top-1 score margin sits far above the
# quantization noise floor (measured ~20x), like a confident real detection.


def _conv_init(rng: XorShift64Star, kh, kw, ci, co) -> tuple[np.ndarray, np.ndarray]:
    bound = math.sqrt(6.0 / (kh * kw * ci))
    w = rng.uniform_array((kh, kw, ci, co), -bound, bound)
    b = rng.uniform_array((co,), 0.0, 0.03)
    return w, b


def _stem_init(rng: XorShift64Star, co) -> tuple[np.ndarray, np.ndarray]:
    w = rng.uniform_array((3, 3, 3, co), -0.08, 0.08)
    for ci in range(3):
        for o in range(co):
            mag = rng.uniform(0.6, 1.0)
            w[1, 1, ci, o] = mag if rng.uniform() < 0.8 else -mag
    b = rng.uniform_array((co,), 0.0, 0.03)
    return w, b


def _dw_init(rng: XorShift64Star, c) -> tuple[np.ndarray, np.ndarray]:
    w = rng.uniform_array((3, 3, c, 1), -0.08, 0.08)
    for ch in range(c):
        w[1, 1, ch, 0] = rng.uniform(0.8, 1.2)
    b = rng.uniform_array((c,), 0.0, 0.03)
    return w, b


# Bias hierarchy: anchor slot 0 and the fine map stay decisively ahead of the
# overlapping alternatives, so ranking is decided by image content alone.
_CLASS_BASE = (-0.7, -1.5)
_SLOT_PENALTY = (0.0, -1.2, -1.6)
_MAP_PENALTY = (0.0, -1.5)
_CLASS_W_RANGE = (0.02, 0.05)

_FIXTURE_ANCHORS = AnchorConfig(
    maps=(
        FeatureMapSpec(grid=(4, 4), scales=(0.35,), ratios=(1.0, 2.0, 0.5)),
        FeatureMapSpec(grid=(2, 2), scales=(0.7,), ratios=(1.0, 2.0, 0.5)),
    ),
    box_coder=(10.0, 10.0, 5.0, 5.0),
)

_DETECTOR_INPUT = 32
_CALIBRATION_IMAGES = 16


def _class_head_init(rng: XorShift64Star, ci: int, num_classes: int, map_idx: int):
    apl = 3
    w = rng.uniform_array((1, 1, ci, apl * num_classes), *_CLASS_W_RANGE)
    b = np.empty(apl * num_classes, dtype=np.float64)
    for s in range(apl):
        for c in range(num_classes):
            base = _CLASS_BASE[c] if num_classes > 1 else _CLASS_BASE[0]
            b[s * num_classes + c] = (base + _SLOT_PENALTY[s] + _MAP_PENALTY[map_idx]
                                      + rng.uniform(-0.05, 0.05))
    return w, b


def _box_head_init(rng: XorShift64Star, ci: int):
    apl = 3
    gain = 0.5 / math.sqrt(ci)
    w = rng.uniform_array((1, 1, ci, apl * 4), -gain, gain)
    b = rng.uniform_array((apl * 4,), -0.1, 0.1)
    return w, b


def build_fixture_model(seed: int = 1, quantized: bool = False, num_classes: int = 2) -> ModelGraph:
    """Seeded tiny detection model; num_classes=1 builds the face variant.

    The same seed always produces an identical graph.  quantized=True derives
    the integer model from the float one via seeded calibration.
    """
    if num_classes not in (1, 2):
        raise ValueError("fixture detector supports 1 or 2 classes")
    rng = XorShift64Star(_mix(0xDE7EC7, seed, num_classes))
    g = _Assembler()
    size = _DETECTOR_INPUT
    image = g.activation("image", (1, size, size, 3))

    w, b = _stem_init(rng, 16)
    x = g.conv("stem", image, w, b, stride=2, activation="relu6")

    # block1: stride 1, 16 -> 16, residual add
    w, b = _conv_init(rng, 1, 1, 16, 32)
    h = g.conv("block1.expand", x, w, b, activation="relu6")
    w, b = _dw_init(rng, 32)
    h = g.conv("block1.depthwise", h, w, b, activation="relu6", depthwise=True)
    w, b = _conv_init(rng, 1, 1, 32, 16)
    h = g.conv("block1.project", h, w, b)
    x = g.add_op("block1.add", x, h)

    # block2: stride 2, 16 -> 32
    w, b = _conv_init(rng, 1, 1, 16, 32)
    h = g.conv("block2.expand", x, w, b, activation="relu6")
    w, b = _dw_init(rng, 32)
    h = g.conv("block2.depthwise", h, w, b, stride=2, activation="relu6", depthwise=True)
    w, b = _conv_init(rng, 1, 1, 32, 32)
    x = g.conv("block2.project", h, w, b)

    # Disjoint 2x2 stride-2 pools: each feature-map cell owns its region.
    w, b = _conv_init(rng, 2, 2, 32, 64)
    feat_a = g.conv("feat_a", x, w, b, stride=2, padding="valid", activation="relu6")
    w, b = _conv_init(rng, 2, 2, 64, 96)
    feat_b = g.conv("feat_b", feat_a, w, b, stride=2, padding="valid", activation="relu6")

    w, b = _box_head_init(rng, 64)
    g.conv("head.box0", feat_a, w, b)
    w, b = _class_head_init(rng, 64, num_classes, 0)
    g.conv("head.cls0", feat_a, w, b)
    w, b = _box_head_init(rng, 96)
    g.conv("head.box1", feat_b, w, b)
    w, b = _class_head_init(rng, 96, num_classes, 1)
    g.conv("head.cls1", feat_b, w, b)

    metadata = {
        "model_kind": "detector",
        "input": "image",
        "input_height": str(size),
        "input_width": str(size),
        "num_classes": str(num_classes),
        "class_names": "mask,nomask" if num_classes == 2 else "face",
        "quantized": "0",
        "box_outputs": "head.box0.out,head.box1.out",
        "class_outputs": "head.cls0.out,head.cls1.out",
        "anchor_config": _FIXTURE_ANCHORS.to_json(),
        "fixture_seed": str(seed),
    }
    graph = ModelGraph(tensors=g.tensors, ops=g.ops, metadata=metadata)
    if quantized:
        return quantize_graph(graph, calibration_inputs(seed, size))
    return graph


def build_fixture_classifier(seed: int = 1, quantized: bool = False, input_size: int = 64) -> ModelGraph:
    """Seeded tiny mask/nomask classifier: backbone, global average pooling,
    flatten, a 128-unit relu dense layer, and a 2-class logit head."""
    rng = XorShift64Star(_mix(0xC1A55, seed, input_size))
    g = _Assembler()
    image = g.activation("image", (1, input_size, input_size, 3))

    w, b = _stem_init(rng, 16)
    x = g.conv("stem", image, w, b, stride=2, activation="relu6")

    w, b = _conv_init(rng, 1, 1, 16, 32)
    h = g.conv("block1.expand", x, w, b, activation="relu6")
    w, b = _dw_init(rng, 32)
    h = g.conv("block1.depthwise", h, w, b, stride=2, activation="relu6", depthwise=True)
    w, b = _conv_init(rng, 1, 1, 32, 32)
    x = g.conv("block1.project", h, w, b)

    w, b = _conv_init(rng, 1, 1, 32, 64)
    h = g.conv("block2.expand", x, w, b, activation="relu6")
    w, b = _dw_init(rng, 64)
    h = g.conv("block2.depthwise", h, w, b, stride=2, activation="relu6", depthwise=True)
    w, b = _conv_init(rng, 1, 1, 64, 32)
    x = g.conv("block2.project", h, w, b)

    # block3: stride 1 with residual, for add-op coverage at classifier scale
    w, b = _conv_init(rng, 1, 1, 32, 64)
    h = g.conv("block3.expand", x, w, b, activation="relu6")
    w, b = _dw_init(rng, 64)
    h = g.conv("block3.depthwise", h, w, b, activation="relu6", depthwise=True)
    w, b = _conv_init(rng, 1, 1, 64, 32)
    h = g.conv("block3.project", h, w, b)
    x = g.add_op("block3.add", x, h)

    x = g.avg_pool("pool", x)
    x = g.flatten("flat", x)
    bound = math.sqrt(6.0 / 32.0)
    w = rng.uniform_array((32, 128), -bound, bound)
    b = rng.uniform_array((128,), -0.1, 0.1)
    x = g.dense("dense1", x, w, b, activation="relu")
    w = rng.uniform_array((128, 2), -0.3, 0.3)
    b = np.array([0.4 + rng.uniform(-0.05, 0.05), -0.4 + rng.uniform(-0.05, 0.05)])
    g.dense("logits", x, w, b)

    metadata = {
        "model_kind": "classifier",
        "input": "image",
        "input_height": str(input_size),
        "input_width": str(input_size),
        "num_classes": "2",
        "class_names": "mask,nomask",
        "quantized": "0",
        "logit_output": "logits.out",
        "fixture_seed": str(seed),
    }
    graph = ModelGraph(tensors=g.tensors, ops=g.ops, metadata=metadata)
    if quantized:
        return quantize_graph(graph, calibration_inputs(seed, input_size))
    return graph


# -- post-training quantization ----------------------------------------------


def calibration_inputs(seed: int, size: int, count: int = _CALIBRATION_IMAGES) -> list[np.ndarray]:
    """Normalized float32 input batches for activation-range calibration."""
    inputs = []
    for i in range(count):
        arr, _ = synthetic_image(_mix(0xCA11B, seed, i), size, size)
        inputs.append(normalize_pixels(arr)[None, ...].astype(np.float32))
    return inputs


def choose_qparams(vmin: float, vmax: float) -> QuantParams:
    """Per-tensor uint8 qparams covering [vmin, vmax], with 0 representable."""
    vmin = min(float(vmin), 0.0)
    vmax = max(float(vmax), 0.0)
    if vmax == vmin:
        return QuantParams(scale=1.0, zero_point=0)
    scale = (vmax - vmin) / 255.0
    zp = int(round_half_away(-vmin / scale))
    return QuantParams(scale=scale, zero_point=min(255, max(0, zp)))


# Ops whose quantized output must reuse the input tensor's qparams: flatten is
# a view, relu6 clamps on the same grid, and the integer mean stays on it too.
_INHERIT_QPARAMS = ("flatten", "relu6", "avg_pool2d")


def quantize_graph(graph: ModelGraph, calib_inputs: list[np.ndarray]) -> ModelGraph:
    """Derive the integer model: min/max calibration plus weight quantization."""
    if graph.is_quantized:
        raise ValueError("graph is already quantized")
    if not calib_inputs:
        raise ValueError("calibration requires at least one input")

    lo: dict[str, float] = {}
    hi: dict[str, float] = {}
    for x in calib_inputs:
        outputs = execute_graph(graph, x)
        for name, arr in outputs.items():
            lo[name] = min(lo.get(name, np.inf), float(arr.min()))
            hi[name] = max(hi.get(name, -np.inf), float(arr.max()))

    qparams: dict[int, QuantParams] = {}
    for idx, t in enumerate(graph.tensors):
        if t.data is None:
            qparams[idx] = choose_qparams(lo[t.name], hi[t.name])
    for op in graph.ops:
        if op.opcode in _INHERIT_QPARAMS:
            qparams[op.outputs[0]] = qparams[op.inputs[0]]

    weight_qp: dict[int, QuantParams] = {}
    for op in graph.ops:
        if op.opcode in ("conv2d", "depthwise_conv2d", "dense"):
            w = graph.tensors[op.inputs[1]]
            weight_qp[op.inputs[1]] = choose_qparams(float(w.data.min()), float(w.data.max()))

    new_tensors: list[GraphTensor] = list(graph.tensors)
    for idx, t in enumerate(graph.tensors):
        if t.data is None:
            qp = qparams[idx]
            new_tensors[idx] = GraphTensor(name=t.name, dtype="u8", shape=t.shape,
                                           scale=qp.scale, zero_point=qp.zero_point)
    for op in graph.ops:
        if op.opcode not in ("conv2d", "depthwise_conv2d", "dense"):
            continue
        x_idx, w_idx, b_idx = op.inputs
        w = graph.tensors[w_idx]
        qp = weight_qp[w_idx]
        new_tensors[w_idx] = GraphTensor(name=w.name, dtype="u8", shape=w.shape,
                                         scale=qp.scale, zero_point=qp.zero_point,
                                         data=quantize(w.data.astype(np.float64), qp))
        b = graph.tensors[b_idx]
        bias_scale = qparams[x_idx].scale * qp.scale
        bias_q = np.clip(round_half_away(b.data.astype(np.float64) / bias_scale),
                         INT32_MIN, INT32_MAX).astype(np.int32)
        new_tensors[b_idx] = GraphTensor(name=b.name, dtype="i32", shape=b.shape,
                                         scale=bias_scale, zero_point=0, data=bias_q)

    metadata = dict(graph.metadata)
    metadata["quantized"] = "1"
    return ModelGraph(tensors=new_tensors, ops=graph.ops, metadata=metadata)
