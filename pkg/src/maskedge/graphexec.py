"""Run a ModelGraph over inputs: the engine's interpreter loop.

GraphRunner dispatches each GraphOp to the matching nnops operator, wrapping
arrays in QTensor or FTensor according to the tensor table.  Per-layer
constants (fixed-point multipliers, folded zero-point epilogues, upcast float
weights) are prepared once on first use and reused across images, so the
per-image path stays lean.  Quantized graphs execute integer-only; float
graphs run the float32 reference path.
"""

from __future__ import annotations

import math

import numpy as np

from . import nnops
from .model import GraphOp, GraphTensor, ModelGraph
from .qtensor import FTensor, QTensor, QuantizationError


def _wrap(t: GraphTensor, arr: np.ndarray):
    if t.dtype == "u8":
        return QTensor(arr, t.qparams)
    return FTensor(arr)


class GraphRunner:
    """Executes one immutable graph; prepared once, reusable across images.

    All per-layer constants are computed eagerly at construction, so run()
    never mutates runner state and concurrent runs on one runner are safe.
    """

    def __init__(self, graph: ModelGraph):
        self.graph = graph
        self._input_idx = graph.input_index()
        self._prepared: dict[int, nnops.PreparedConv] = {}
        self._specs: dict[int, nnops.ConvSpec] = {}
        self._weights: dict[int, object] = {}
        for op_idx, op in enumerate(graph.ops):
            if op.opcode in ("conv2d", "depthwise_conv2d", "dense"):
                self._check_bias_scale(op)
            if op.opcode in ("conv2d", "depthwise_conv2d"):
                x_t = graph.tensors[op.inputs[0]]
                w = self._weight(op.inputs[1])
                bias = graph.tensors[op.inputs[2]].data
                out_t = graph.tensors[op.outputs[0]]
                spec = nnops.ConvSpec(
                    kernel=tuple(graph.tensors[op.inputs[1]].shape[:2]),
                    stride=op.stride,
                    padding=op.padding,
                    depthwise=op.opcode == "depthwise_conv2d",
                    fused_activation=op.activation,
                )
                self._specs[op_idx] = spec
                self._prepared[op_idx] = nnops.prepare_conv(
                    x_t.qparams if x_t.dtype == "u8" else None, w, bias, spec,
                    out_t.qparams if out_t.dtype == "u8" else None)

    def _check_bias_scale(self, op: GraphOp) -> None:
        x, w, b = (self.graph.tensors[i] for i in op.inputs)
        if b.dtype != "i32":
            return
        expected = x.scale * w.scale
        if not math.isclose(b.scale, expected, rel_tol=1e-9):
            raise QuantizationError(
                f"bias {b.name!r} stored at scale {b.scale!r}, expected S_in*S_w = {expected!r}"
            )

    def _weight(self, idx: int):
        cached = self._weights.get(idx)
        if cached is None:
            t = self.graph.tensors[idx]
            cached = _wrap(t, t.data)
            self._weights[idx] = cached
        return cached

    def run(self, input_array: np.ndarray) -> dict[str, np.ndarray]:
        """Execute every op in order; returns arrays for all activations."""
        graph = self.graph
        input_tensor = graph.tensors[self._input_idx]
        arr = np.asarray(input_array)
        if arr.shape != tuple(input_tensor.shape):
            raise ValueError(f"input shape {arr.shape} does not match model input {tuple(input_tensor.shape)}")
        if arr.dtype != np.dtype("uint8" if input_tensor.dtype == "u8" else "float32"):
            raise ValueError(f"input dtype {arr.dtype} does not match model input dtype {input_tensor.dtype}")

        values: dict[int, np.ndarray] = {self._input_idx: arr}

        def fetch(idx: int):
            t = graph.tensors[idx]
            if t.data is not None:
                return self._weight(idx)
            return _wrap(t, values[idx])

        for op_idx, op in enumerate(graph.ops):
            out_t = graph.tensors[op.outputs[0]]
            out_qp = out_t.qparams if out_t.dtype == "u8" else None

            if op.opcode in ("conv2d", "depthwise_conv2d"):
                x = fetch(op.inputs[0])
                w = self._weight(op.inputs[1])
                bias = graph.tensors[op.inputs[2]].data
                result = nnops.conv2d(x, w, bias, self._specs[op_idx], out_qp,
                                      prepared=self._prepared[op_idx])
            elif op.opcode == "dense":
                x = fetch(op.inputs[0])
                w = self._weight(op.inputs[1])
                bias = graph.tensors[op.inputs[2]].data
                result = nnops.dense(x, w, bias, activation=op.activation, out_qp=out_qp)
            elif op.opcode == "avg_pool2d":
                result = nnops.avg_pool2d(fetch(op.inputs[0]), out_qp)
            elif op.opcode == "relu6":
                result = nnops.relu6(fetch(op.inputs[0]))
            elif op.opcode == "add":
                result = nnops.residual_add(fetch(op.inputs[0]), fetch(op.inputs[1]), out_qp)
            elif op.opcode == "flatten":
                x = fetch(op.inputs[0])
                reshaped = x.array.reshape(out_t.shape)
                result = QTensor(reshaped, x.qparams) if isinstance(x, QTensor) else FTensor(reshaped)
            else:  # pragma: no cover - load_model rejects unknown opcodes
                raise ValueError(f"unsupported opcode {op.opcode!r}")

            if result.array.shape != tuple(out_t.shape):
                raise ValueError(
                    f"op {op.opcode} produced shape {result.array.shape}, "
                    f"tensor table declares {tuple(out_t.shape)} for {out_t.name!r}"
                )
            values[op.outputs[0]] = result.array

        return {graph.tensors[i].name: v for i, v in values.items()}


def execute_graph(graph: ModelGraph, input_array: np.ndarray) -> dict[str, np.ndarray]:
    """One-shot convenience wrapper around GraphRunner."""
    return GraphRunner(graph).run(input_array)
