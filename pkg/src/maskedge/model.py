"""The QMDL model container: bit-exact serialization, graph, weight surgery.

A model is a named tensor table (weights, biases, activation placeholders,
each with affine quantization parameters) plus an ordered operator list and a
string-keyed metadata section.  The on-disk format is little-endian and
byte-deterministic for a given graph; docs/qmdl-format.md walks through an
annotated hex dump.

Graphs are immutable after construction and safe to share across threads;
surgery returns a new graph.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .postproc import AnchorConfig
from .qtensor import QuantParams, quantize

logger = logging.getLogger(__name__)

MAGIC = b"QMDL"
FORMAT_VERSION = 1

DTYPE_CODES = {"u8": 0, "i32": 1, "f32": 2}
DTYPE_NAMES = {v: k for k, v in DTYPE_CODES.items()}
DTYPE_NUMPY = {"u8": np.uint8, "i32": np.int32, "f32": np.float32}

OPCODES = {
    "conv2d": 1,
    "depthwise_conv2d": 2,
    "avg_pool2d": 3,
    "dense": 4,
    "relu6": 5,
    "add": 6,
    "flatten": 7,
}
OPCODE_NAMES = {v: k for k, v in OPCODES.items()}
_OP_ARITY = {
    "conv2d": 3,
    "depthwise_conv2d": 3,
    "avg_pool2d": 1,
    "dense": 3,
    "relu6": 1,
    "add": 2,
    "flatten": 1,
}

PADDING_CODES = {"same": 0, "valid": 1}
PADDING_NAMES = {v: k for k, v in PADDING_CODES.items()}
ACTIVATION_CODES = {"none": 0, "relu": 1, "relu6": 2}
ACTIVATION_NAMES = {v: k for k, v in ACTIVATION_CODES.items()}

_MAX_OP_INPUTS = 4
_MAX_OP_OUTPUTS = 2


class ModelFormatError(ValueError):
    """Base class for malformed or inconsistent model files."""


class BadMagicError(ModelFormatError):
    pass


class TruncatedModelError(ModelFormatError):
    pass


class DanglingTensorError(ModelFormatError):
    pass


class InvalidQuantParamsError(ModelFormatError):
    pass


class UnknownOpcodeError(ModelFormatError):
    pass


class SurgeryError(ValueError):
    """extend_class_head preconditions violated."""


@dataclass(frozen=True)
class GraphTensor:
    """One tensor-table entry.  data is None for activation placeholders."""

    name: str
    dtype: str
    shape: tuple[int, ...]
    scale: float = 1.0
    zero_point: int = 0
    data: np.ndarray | None = None

    def __post_init__(self):
        if self.dtype not in DTYPE_CODES:
            raise ModelFormatError(f"tensor {self.name!r}: unknown dtype {self.dtype!r}")
        if any(d < 1 for d in self.shape):
            raise ModelFormatError(f"tensor {self.name!r}: non-positive dimension in {self.shape}")
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if not (math.isfinite(self.scale) and self.scale > 0.0):
            raise InvalidQuantParamsError(f"tensor {self.name!r}: scale {self.scale!r} must be positive and finite")
        if self.dtype == "u8" and not (0 <= self.zero_point <= 255):
            raise InvalidQuantParamsError(f"tensor {self.name!r}: zero_point {self.zero_point} outside [0, 255]")
        if self.dtype == "i32" and self.zero_point != 0:
            raise InvalidQuantParamsError(f"tensor {self.name!r}: i32 tensors must have zero_point 0")
        if self.data is not None:
            arr = np.asarray(self.data, dtype=DTYPE_NUMPY[self.dtype])
            if arr.shape != self.shape:
                raise ModelFormatError(
                    f"tensor {self.name!r}: data shape {arr.shape} does not match declared {self.shape}"
                )
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, "data", arr)

    @property
    def qparams(self) -> QuantParams:
        return QuantParams(scale=self.scale, zero_point=self.zero_point)

    def same_as(self, other: "GraphTensor") -> bool:
        if (self.name, self.dtype, self.shape, self.scale, self.zero_point) != (
            other.name, other.dtype, other.shape, other.scale, other.zero_point,
        ):
            return False
        if (self.data is None) != (other.data is None):
            return False
        return self.data is None or bool(np.array_equal(self.data, other.data))


@dataclass(frozen=True)
class GraphOp:
    """One operator: opcode, tensor-table indices, fixed attribute record."""

    opcode: str
    inputs: tuple[int, ...]
    outputs: tuple[int, ...]
    stride: tuple[int, int] = (1, 1)
    padding: str = "same"
    activation: str = "none"
    extra: int = 0

    def __post_init__(self):
        if self.opcode not in OPCODES:
            raise UnknownOpcodeError(f"unknown opcode {self.opcode!r}")
        if self.padding not in PADDING_CODES:
            raise ModelFormatError(f"unknown padding {self.padding!r}")
        if self.activation not in ACTIVATION_CODES:
            raise ModelFormatError(f"unknown activation {self.activation!r}")
        if len(self.inputs) != _OP_ARITY[self.opcode]:
            raise ModelFormatError(
                f"{self.opcode} expects {_OP_ARITY[self.opcode]} inputs, got {len(self.inputs)}"
            )
        if len(self.outputs) != 1:
            raise ModelFormatError(f"{self.opcode} expects 1 output, got {len(self.outputs)}")
        object.__setattr__(self, "inputs", tuple(int(i) for i in self.inputs))
        object.__setattr__(self, "outputs", tuple(int(i) for i in self.outputs))
        object.__setattr__(self, "stride", (int(self.stride[0]), int(self.stride[1])))


class ModelGraph:
    """A loaded model: tensor table, ordered operator list, metadata."""

    def __init__(self, tensors, ops, metadata):
        self.tensors: tuple[GraphTensor, ...] = tuple(tensors)
        self.ops: tuple[GraphOp, ...] = tuple(ops)
        self.metadata: dict[str, str] = dict(metadata)
        self._index = {t.name: i for i, t in enumerate(self.tensors)}
        if len(self._index) != len(self.tensors):
            raise ModelFormatError("duplicate tensor names in tensor table")
        self._validate()

    # -- structure ---------------------------------------------------------

    def _validate(self) -> None:
        produced: set[int] = set()
        input_idx = self.input_index()
        for op in self.ops:
            for idx in op.inputs:
                if not (0 <= idx < len(self.tensors)):
                    raise DanglingTensorError(f"{op.opcode} references tensor index {idx} out of range")
                t = self.tensors[idx]
                if t.data is None and idx not in produced and idx != input_idx:
                    raise DanglingTensorError(
                        f"{op.opcode} consumes activation {t.name!r} before it is produced"
                    )
            for idx in op.outputs:
                if not (0 <= idx < len(self.tensors)):
                    raise DanglingTensorError(f"{op.opcode} writes tensor index {idx} out of range")
                if idx in produced:
                    raise ModelFormatError(f"tensor {self.tensors[idx].name!r} produced twice")
                if self.tensors[idx].data is not None:
                    raise ModelFormatError(f"op output {self.tensors[idx].name!r} must not carry data")
                if idx == input_idx:
                    raise ModelFormatError("graph input cannot be an op output")
                produced.add(idx)
        for key in ("box_outputs", "class_outputs"):
            if key in self.metadata:
                for name in self.metadata[key].split(","):
                    if self.tensor_index(name) not in produced:
                        raise DanglingTensorError(f"metadata {key} names unproduced tensor {name!r}")
        kind = self.metadata.get("model_kind")
        if kind is not None:
            required = ["input_height", "input_width", "num_classes", "class_names"]
            if kind == "detector":
                required += ["box_outputs", "class_outputs", "anchor_config"]
            elif kind == "classifier":
                required.append("logit_output")
            else:
                raise ModelFormatError(f"unknown model_kind {kind!r}")
            for key in required:
                if key not in self.metadata:
                    raise ModelFormatError(f"{kind} model missing metadata key {key!r}")
            if kind == "classifier" and self.metadata["logit_output"] not in {
                self.tensors[i].name for i in produced
            }:
                raise DanglingTensorError(
                    f"logit_output names unproduced tensor {self.metadata['logit_output']!r}")

    def tensor_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise DanglingTensorError(f"no tensor named {name!r}") from None

    def tensor(self, name: str) -> GraphTensor:
        return self.tensors[self.tensor_index(name)]

    def input_index(self) -> int:
        if "input" not in self.metadata:
            raise ModelFormatError("model metadata missing 'input'")
        return self.tensor_index(self.metadata["input"])

    # -- convenience -------------------------------------------------------

    @property
    def is_quantized(self) -> bool:
        return self.metadata.get("quantized") == "1"

    @property
    def input_size(self) -> tuple[int, int]:
        return int(self.metadata["input_height"]), int(self.metadata["input_width"])

    @property
    def num_classes(self) -> int:
        return int(self.metadata["num_classes"])

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(self.metadata["class_names"].split(","))

    def anchor_config(self) -> AnchorConfig:
        return AnchorConfig.from_json(self.metadata["anchor_config"])

    def box_output_names(self) -> tuple[str, ...]:
        return tuple(self.metadata["box_outputs"].split(","))

    def class_output_names(self) -> tuple[str, ...]:
        return tuple(self.metadata["class_outputs"].split(","))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelGraph):
            return NotImplemented
        return (
            self.metadata == other.metadata
            and self.ops == other.ops
            and len(self.tensors) == len(other.tensors)
            and all(a.same_as(b) for a, b in zip(self.tensors, other.tensors))
        )

    def __hash__(self):  # graphs are compared structurally, not hashed
        return id(self)


# -- serialization ----------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedModelError(f"file truncated inside {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))


def save_model(graph: ModelGraph) -> bytes:
    """Serialize a graph; the byte output is deterministic for a given graph."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HH", FORMAT_VERSION, 0)
    meta = sorted(graph.metadata.items())
    out += struct.pack("<I", len(meta))
    for key, value in meta:
        kb, vb = key.encode("utf-8"), value.encode("utf-8")
        out += struct.pack("<H", len(kb)) + kb
        out += struct.pack("<H", len(vb)) + vb

    blob = bytearray()
    out += struct.pack("<I", len(graph.tensors))
    for t in graph.tensors:
        nb = t.name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", DTYPE_CODES[t.dtype], len(t.shape))
        out += struct.pack(f"<{len(t.shape)}I", *t.shape)
        out += struct.pack("<d", t.scale)
        out += struct.pack("<i", t.zero_point)
        if t.data is None:
            out += struct.pack("<QQ", 0, 0)
        else:
            raw = np.ascontiguousarray(t.data).tobytes()
            out += struct.pack("<QQ", len(raw), len(blob))
            blob += raw

    out += struct.pack("<I", len(graph.ops))
    for op in graph.ops:
        out += struct.pack("<H", OPCODES[op.opcode])
        out += struct.pack(
            "<BBBB",
            op.stride[0],
            op.stride[1],
            PADDING_CODES[op.padding],
            ACTIVATION_CODES[op.activation],
        )
        out += struct.pack("<i", op.extra)
        inputs = list(op.inputs) + [-1] * (_MAX_OP_INPUTS - len(op.inputs))
        outputs = list(op.outputs) + [-1] * (_MAX_OP_OUTPUTS - len(op.outputs))
        out += struct.pack(f"<{_MAX_OP_INPUTS}i", *inputs)
        out += struct.pack(f"<{_MAX_OP_OUTPUTS}i", *outputs)

    out += struct.pack("<Q", len(blob))
    out += blob
    return bytes(out)


def load_model(data: bytes) -> ModelGraph:
    """Parse QMDL bytes into a validated ModelGraph.

    Raises a distinct error per failure mode: BadMagicError,
    TruncatedModelError, UnknownOpcodeError, DanglingTensorError,
    InvalidQuantParamsError.
    """
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError("not a QMDL file (bad magic)")
    version, _flags = r.unpack("HH", "header")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")

    (meta_count,) = r.unpack("I", "metadata header")
    metadata: dict[str, str] = {}
    for _ in range(meta_count):
        (klen,) = r.unpack("H", "metadata key")
        key = r.take(klen, "metadata key").decode("utf-8")
        (vlen,) = r.unpack("H", "metadata value")
        metadata[key] = r.take(vlen, "metadata value").decode("utf-8")

    (tensor_count,) = r.unpack("I", "tensor table header")
    specs = []
    for _ in range(tensor_count):
        (nlen,) = r.unpack("H", "tensor name")
        name = r.take(nlen, "tensor name").decode("utf-8")
        dtype_code, ndim = r.unpack("BB", f"tensor {name!r} header")
        if dtype_code not in DTYPE_NAMES:
            raise ModelFormatError(f"tensor {name!r}: unknown dtype code {dtype_code}")
        shape = r.unpack(f"{ndim}I", f"tensor {name!r} shape")
        (scale,) = r.unpack("d", f"tensor {name!r} scale")
        (zero_point,) = r.unpack("i", f"tensor {name!r} zero point")
        data_len, data_offset = r.unpack("QQ", f"tensor {name!r} data record")
        specs.append((name, DTYPE_NAMES[dtype_code], shape, scale, zero_point, data_len, data_offset))

    (op_count,) = r.unpack("I", "op list header")
    ops = []
    for _ in range(op_count):
        (opcode,) = r.unpack("H", "op record")
        if opcode not in OPCODE_NAMES:
            raise UnknownOpcodeError(f"unknown opcode {opcode}")
        name = OPCODE_NAMES[opcode]
        sh, sw, pad_code, act_code = r.unpack("BBBB", "op attributes")
        if pad_code not in PADDING_NAMES:
            raise ModelFormatError(f"op {name}: unknown padding code {pad_code}")
        if act_code not in ACTIVATION_NAMES:
            raise ModelFormatError(f"op {name}: unknown activation code {act_code}")
        (extra,) = r.unpack("i", "op attributes")
        raw_inputs = r.unpack(f"{_MAX_OP_INPUTS}i", "op inputs")
        raw_outputs = r.unpack(f"{_MAX_OP_OUTPUTS}i", "op outputs")
        inputs = tuple(i for i in raw_inputs if i != -1)
        outputs = tuple(i for i in raw_outputs if i != -1)
        ops.append(GraphOp(opcode=name, inputs=inputs, outputs=outputs, stride=(sh, sw),
                           padding=PADDING_NAMES[pad_code], activation=ACTIVATION_NAMES[act_code],
                           extra=extra))

    (blob_len,) = r.unpack("Q", "data blob header")
    blob = r.take(blob_len, "data blob")
    if r.pos != len(data):
        raise ModelFormatError(f"{len(data) - r.pos} trailing bytes after data blob")

    tensors = []
    for name, dtype, shape, scale, zero_point, data_len, data_offset in specs:
        if data_len == 0:
            tensor_data = None
        else:
            if data_offset + data_len > len(blob):
                raise TruncatedModelError(f"tensor {name!r} data extends past the blob")
            expected = int(np.prod(shape)) * np.dtype(DTYPE_NUMPY[dtype]).itemsize
            if data_len != expected:
                raise ModelFormatError(
                    f"tensor {name!r}: {data_len} data bytes but shape {shape} needs {expected}"
                )
            tensor_data = np.frombuffer(
                blob, dtype=DTYPE_NUMPY[dtype], count=int(np.prod(shape)), offset=data_offset
            ).reshape(shape)
        tensors.append(GraphTensor(name=name, dtype=dtype, shape=tuple(shape), scale=scale,
                                   zero_point=zero_point, data=tensor_data))

    return ModelGraph(tensors=tensors, ops=ops, metadata=metadata)


def load_model_file(path) -> ModelGraph:
    with open(path, "rb") as fh:
        return load_model(fh.read())


def save_model_file(graph: ModelGraph, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_model(graph))


# -- class-head surgery ------------------------------------------------------


def extend_class_head(face_model: ModelGraph, epsilon: float = 1e-7) -> ModelGraph:
    """Grow a single-class detector head to the two-class {mask, nomask} head.

    Both new classes start from exact copies of the face weights; the mask
    class additionally gets epsilon added to every weight, which breaks the
    tie in favor of the other class.  Biases are copied unperturbed, and
    every tensor outside the class-prediction head stays bit-identical.
    Class slot 0 per anchor is mask (class id 1), slot 1 is nomask (id 2).
    """
    if face_model.metadata.get("model_kind") != "detector":
        raise SurgeryError("extend_class_head requires a detector model")
    if face_model.num_classes != 1:
        raise SurgeryError(f"model already has {face_model.num_classes} classes")
    class_outputs = face_model.class_output_names()

    head_ops: dict[int, GraphOp] = {}
    for op_idx, op in enumerate(face_model.ops):
        for out_idx in op.outputs:
            if face_model.tensors[out_idx].name in class_outputs:
                if op.opcode not in ("conv2d", "depthwise_conv2d"):
                    raise SurgeryError(f"class output produced by {op.opcode}, expected a conv head")
                head_ops[op_idx] = op
    if len(head_ops) != len(class_outputs):
        raise SurgeryError("missing class head: not every class output has a producing conv")

    rewrite: dict[int, GraphTensor] = {}
    for op in head_ops.values():
        _, w_idx, b_idx = op.inputs
        (out_idx,) = op.outputs
        rewrite[w_idx] = _extend_head_weights(face_model.tensors[w_idx], epsilon)
        rewrite[b_idx] = _extend_head_bias(face_model.tensors[b_idx])
        old_out = face_model.tensors[out_idx]
        new_shape = old_out.shape[:-1] + (old_out.shape[-1] * 2,)
        rewrite[out_idx] = GraphTensor(name=old_out.name, dtype=old_out.dtype, shape=new_shape,
                                       scale=old_out.scale, zero_point=old_out.zero_point)

    tensors = [rewrite.get(i, t) for i, t in enumerate(face_model.tensors)]
    metadata = dict(face_model.metadata)
    metadata["num_classes"] = "2"
    metadata["class_names"] = "mask,nomask"
    return ModelGraph(tensors=tensors, ops=face_model.ops, metadata=metadata)


def _extend_head_weights(w: GraphTensor, epsilon: float) -> GraphTensor:
    """Duplicate per-anchor class channels: slot 0 = face + epsilon, slot 1 = face."""
    apl = w.shape[-1]  # one channel per anchor at num_classes == 1
    new_shape = w.shape[:-1] + (apl * 2,)
    if w.dtype == "f32":
        face = w.data.astype(np.float64)
        out = np.empty(new_shape, dtype=np.float64)
        out[..., 0::2] = face + epsilon
        out[..., 1::2] = face
        return GraphTensor(name=w.name, dtype="f32", shape=new_shape, scale=w.scale,
                           zero_point=w.zero_point, data=out.astype(np.float32))
    if w.dtype == "u8":
        if epsilon != 0.0 and abs(epsilon) < w.scale / 2.0:
            logger.warning(
                "epsilon %g is below the quantization resolution %g of %s; "
                "mask and nomask weights will be identical",
                epsilon, w.scale / 2.0, w.name,
            )
        face = w.scale * (w.data.astype(np.float64) - w.zero_point)
        perturbed = quantize(face + epsilon, w.qparams)
        out = np.empty(new_shape, dtype=np.uint8)
        out[..., 0::2] = perturbed
        out[..., 1::2] = w.data
        return GraphTensor(name=w.name, dtype="u8", shape=new_shape, scale=w.scale,
                           zero_point=w.zero_point, data=out)
    raise SurgeryError(f"class head weights {w.name!r} have unexpected dtype {w.dtype}")


def _extend_head_bias(b: GraphTensor) -> GraphTensor:
    apl = b.shape[-1]
    new_shape = b.shape[:-1] + (apl * 2,)
    out = np.empty(new_shape, dtype=DTYPE_NUMPY[b.dtype])
    out[..., 0::2] = b.data
    out[..., 1::2] = b.data
    return GraphTensor(name=b.name, dtype=b.dtype, shape=new_shape, scale=b.scale,
                       zero_point=b.zero_point, data=out)
