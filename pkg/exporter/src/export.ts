/**
 * Checkpoint -> QMDL conversion: fold batch norm into conv weights, transpose
 * source layouts (OIHW / OI) to the engine's (kh, kw, in, out) / (features,
 * units) convention, derive uint8 quantization from the recorded ranges, and
 * emit deterministic QMDL bytes.
 *
 * The returned quantized graph is also the input to the reference runtime,
 * which the round-trip tests compare against the engine.
 */

import {
  Checkpoint,
  CheckpointError,
  CheckpointLayer,
  decodeF32,
} from "./checkpoint.js";
import { QmdlOp, QmdlTensor, writeQmdl } from "./qmdl.js";
import { chooseQparams, QuantParams, roundHalfAway } from "./quantize.js";

export interface QuantGraph {
  tensors: QmdlTensor[];
  ops: QmdlOp[];
  metadata: Record<string, string>;
  inputIndex: number;
  index: Map<string, number>;
}

export interface ExportResult {
  bytes: Buffer;
  graph: QuantGraph;
}

interface FoldedWeights {
  weights: Float64Array; // engine layout, flattened row-major
  shape: number[];
  bias: Float64Array;
}

function foldBatchNorm(layer: CheckpointLayer, outChannels: number,
                       weights: Float64Array, perOut: number,
                       bias: Float64Array): { weights: Float64Array; bias: Float64Array } {
  if (!layer.batch_norm) {
    return { weights, bias };
  }
  const bn = layer.batch_norm;
  const gamma = decodeF32(bn.gamma);
  const beta = decodeF32(bn.beta);
  const mean = decodeF32(bn.mean);
  const variance = decodeF32(bn.variance);
  if (gamma.length !== outChannels) {
    throw new CheckpointError(
      `layer '${layer.name}': batch norm has ${gamma.length} channels, conv has ${outChannels}`);
  }
  const factor = new Float64Array(outChannels);
  for (let o = 0; o < outChannels; o++) {
    factor[o] = gamma[o] / Math.sqrt(variance[o] + bn.epsilon);
  }
  const w = new Float64Array(weights.length);
  for (let o = 0; o < outChannels; o++) {
    for (let k = 0; k < perOut; k++) {
      w[o * perOut + k] = weights[o * perOut + k] * factor[o];
    }
  }
  const b = new Float64Array(outChannels);
  for (let o = 0; o < outChannels; o++) {
    b[o] = beta[o] + (bias[o] - mean[o]) * factor[o];
  }
  return { weights: w, bias: b };
}

function convWeights(layer: CheckpointLayer, inChannels: number, depthwise: boolean): FoldedWeights {
  if (!layer.weights) {
    throw new CheckpointError(`layer '${layer.name}': missing weights`);
  }
  const raw = decodeF32(layer.weights.data);
  const shape = layer.weights.shape;
  if (shape.length !== 4) {
    throw new CheckpointError(`layer '${layer.name}': conv weights must be OIHW, got rank ${shape.length}`);
  }
  const [o, i, kh, kw] = shape;
  if (raw.length !== o * i * kh * kw) {
    throw new CheckpointError(`layer '${layer.name}': weight payload does not match shape`);
  }
  if (depthwise) {
    if (i !== 1 || o % inChannels !== 0) {
      throw new CheckpointError(
        `layer '${layer.name}': depthwise weights expect shape (channels*mult, 1, kh, kw) `
        + `with ${inChannels} channels, got (${shape.join(", ")})`);
    }
  } else if (i !== inChannels) {
    throw new CheckpointError(
      `layer '${layer.name}': weights expect ${i} input channels, input has ${inChannels}`);
  }
  const bias = layer.bias ? decodeF32(layer.bias.data) : new Float64Array(o);
  if (bias.length !== o) {
    throw new CheckpointError(`layer '${layer.name}': bias has ${bias.length} values for ${o} channels`);
  }
  const folded = foldBatchNorm(layer, o, raw, i * kh * kw, bias);

  // OIHW -> (kh, kw, in, out); depthwise -> (kh, kw, channels, mult) with the
  // source channel order o = c * mult + m preserved
  const out = new Float64Array(raw.length);
  if (depthwise) {
    const mult = o / inChannels;
    for (let c = 0; c < inChannels; c++) {
      for (let m = 0; m < mult; m++) {
        const src = (c * mult + m) * kh * kw;
        for (let dy = 0; dy < kh; dy++) {
          for (let dx = 0; dx < kw; dx++) {
            out[((dy * kw + dx) * inChannels + c) * mult + m] = folded.weights[src + dy * kw + dx];
          }
        }
      }
    }
    return { weights: out, shape: [kh, kw, inChannels, mult], bias: folded.bias };
  }
  for (let oc = 0; oc < o; oc++) {
    for (let ic = 0; ic < i; ic++) {
      const src = (oc * i + ic) * kh * kw;
      for (let dy = 0; dy < kh; dy++) {
        for (let dx = 0; dx < kw; dx++) {
          out[((dy * kw + dx) * i + ic) * o + oc] = folded.weights[src + dy * kw + dx];
        }
      }
    }
  }
  return { weights: out, shape: [kh, kw, i, o], bias: folded.bias };
}

function denseWeights(layer: CheckpointLayer, features: number): FoldedWeights {
  if (!layer.weights) {
    throw new CheckpointError(`layer '${layer.name}': missing weights`);
  }
  const shape = layer.weights.shape;
  if (shape.length !== 2 || shape[1] !== features) {
    throw new CheckpointError(
      `layer '${layer.name}': dense weights must be (units, ${features}), got (${shape.join(", ")})`);
  }
  const [units] = shape;
  const raw = decodeF32(layer.weights.data);
  const bias = layer.bias ? decodeF32(layer.bias.data) : new Float64Array(units);
  const out = new Float64Array(raw.length);
  for (let u = 0; u < units; u++) {
    for (let f = 0; f < features; f++) {
      out[f * units + u] = raw[u * features + f]; // OI -> IO
    }
  }
  return { weights: out, shape: [features, units], bias };
}

function minMax(values: Float64Array): [number, number] {
  let lo = Infinity;
  let hi = -Infinity;
  for (const v of values) {
    if (v < lo) lo = v;
    if (v > hi) hi = v;
  }
  return [lo, hi];
}

function outSpatial(size: number, k: number, stride: number, padding: "same" | "valid"): number {
  return padding === "same" ? Math.ceil(size / stride) : Math.floor((size - k) / stride) + 1;
}

export function exportCheckpoint(ckpt: Checkpoint): ExportResult {
  const tensors: QmdlTensor[] = [];
  const ops: QmdlOp[] = [];
  const index = new Map<string, number>();
  const qparams = new Map<number, QuantParams>();
  const shapes = new Map<number, number[]>();

  const addTensor = (t: QmdlTensor, qp?: QuantParams): number => {
    if (index.has(t.name)) {
      throw new CheckpointError(`duplicate layer/tensor name '${t.name}'`);
    }
    tensors.push(t);
    const idx = tensors.length - 1;
    index.set(t.name, idx);
    if (qp) qparams.set(idx, qp);
    shapes.set(idx, t.shape);
    return idx;
  };

  const inputQp = chooseQparams(ckpt.input.range[0], ckpt.input.range[1]);
  const inputIdx = addTensor({
    name: "image",
    dtype: "u8",
    shape: [1, ckpt.input.height, ckpt.input.width, ckpt.input.channels],
    scale: inputQp.scale,
    zeroPoint: inputQp.zeroPoint,
  }, inputQp);

  const resolve = (name: string): number => {
    const target = name === "image" ? "image" : `${name}.out`;
    const idx = index.get(target);
    if (idx === undefined) {
      throw new CheckpointError(`layer input '${name}' does not name an earlier layer`);
    }
    return idx;
  };

  for (const layer of ckpt.layers) {
    const xIdx = resolve(layer.input);
    const xShape = shapes.get(xIdx)!;
    const xQp = qparams.get(xIdx)!;
    const outName = `${layer.name}.out`;
    const declaredQp = chooseQparams(layer.output_range[0], layer.output_range[1]);

    if (layer.type === "conv2d" || layer.type === "depthwise_conv2d") {
      const depthwise = layer.type === "depthwise_conv2d";
      const folded = convWeights(layer, xShape[3], depthwise);
      const [kh, kw] = folded.shape;
      const co = depthwise ? folded.shape[2] * folded.shape[3] : folded.shape[3];
      const wQp = chooseQparams(...minMax(folded.weights));
      const wIdx = addTensor({
        name: `${layer.name}.weights`, dtype: "u8", shape: folded.shape,
        scale: wQp.scale, zeroPoint: wQp.zeroPoint,
        data: quantizeU8(folded.weights, wQp),
      });
      const biasScale = xQp.scale * wQp.scale;
      const bIdx = addTensor({
        name: `${layer.name}.bias`, dtype: "i32", shape: [co],
        scale: biasScale, zeroPoint: 0,
        data: quantizeBias(folded.bias, biasScale),
      });
      const oh = outSpatial(xShape[1], kh, layer.stride, layer.padding);
      const ow = outSpatial(xShape[2], kw, layer.stride, layer.padding);
      const outIdx = addTensor({
        name: outName, dtype: "u8", shape: [1, oh, ow, co],
        scale: declaredQp.scale, zeroPoint: declaredQp.zeroPoint,
      }, declaredQp);
      ops.push({
        opcode: layer.type, strideH: layer.stride, strideW: layer.stride,
        padding: layer.padding, activation: layer.activation, extra: 0,
        inputs: [xIdx, wIdx, bIdx], outputs: [outIdx],
      });
    } else if (layer.type === "dense") {
      if (xShape.length !== 2) {
        throw new CheckpointError(`layer '${layer.name}': dense input must be flattened first`);
      }
      const folded = denseWeights(layer, xShape[1]);
      const wQp = chooseQparams(...minMax(folded.weights));
      const wIdx = addTensor({
        name: `${layer.name}.weights`, dtype: "u8", shape: folded.shape,
        scale: wQp.scale, zeroPoint: wQp.zeroPoint,
        data: quantizeU8(folded.weights, wQp),
      });
      const biasScale = xQp.scale * wQp.scale;
      const bIdx = addTensor({
        name: `${layer.name}.bias`, dtype: "i32", shape: [folded.shape[1]],
        scale: biasScale, zeroPoint: 0,
        data: quantizeBias(folded.bias, biasScale),
      });
      const outIdx = addTensor({
        name: outName, dtype: "u8", shape: [1, folded.shape[1]],
        scale: declaredQp.scale, zeroPoint: declaredQp.zeroPoint,
      }, declaredQp);
      ops.push({
        opcode: "dense", strideH: 1, strideW: 1, padding: "valid",
        activation: layer.activation, extra: 0,
        inputs: [xIdx, wIdx, bIdx], outputs: [outIdx],
      });
    } else if (layer.type === "avg_pool2d") {
      // integer mean stays on the input grid; range metadata is ignored here
      const outIdx = addTensor({
        name: outName, dtype: "u8", shape: [1, 1, 1, xShape[3]],
        scale: xQp.scale, zeroPoint: xQp.zeroPoint,
      }, xQp);
      ops.push({
        opcode: "avg_pool2d", strideH: 1, strideW: 1, padding: "same",
        activation: "none", extra: 0, inputs: [xIdx], outputs: [outIdx],
      });
    } else if (layer.type === "flatten") {
      const flat = xShape.reduce((a, b) => a * b, 1);
      const outIdx = addTensor({
        name: outName, dtype: "u8", shape: [1, flat],
        scale: xQp.scale, zeroPoint: xQp.zeroPoint,
      }, xQp);
      ops.push({
        opcode: "flatten", strideH: 1, strideW: 1, padding: "same",
        activation: "none", extra: 0, inputs: [xIdx], outputs: [outIdx],
      });
    } else if (layer.type === "add") {
      if (!layer.residual) {
        throw new CheckpointError(`layer '${layer.name}': add needs a 'residual' input`);
      }
      const bIdx = resolve(layer.residual);
      const bShape = shapes.get(bIdx)!;
      if (bShape.join(",") !== xShape.join(",")) {
        throw new CheckpointError(
          `layer '${layer.name}': add operands have shapes (${xShape}) vs (${bShape})`);
      }
      const outIdx = addTensor({
        name: outName, dtype: "u8", shape: [...xShape],
        scale: declaredQp.scale, zeroPoint: declaredQp.zeroPoint,
      }, declaredQp);
      ops.push({
        opcode: "add", strideH: 1, strideW: 1, padding: "same",
        activation: "none", extra: 0, inputs: [xIdx, bIdx], outputs: [outIdx],
      });
    } else {
      throw new CheckpointError(`unsupported op '${layer.type}' in layer '${layer.name}'`);
    }
  }

  const metadata: Record<string, string> = {
    model_kind: ckpt.kind,
    input: "image",
    input_height: String(ckpt.input.height),
    input_width: String(ckpt.input.width),
    num_classes: String(ckpt.class_names.length),
    class_names: ckpt.class_names.join(","),
    quantized: "1",
    exporter: "maskedge-exporter/edgeckpt-v1",
  };
  if (ckpt.kind === "detector") {
    for (const name of [...ckpt.outputs!.boxes, ...ckpt.outputs!.classes]) {
      if (!index.has(`${name}.out`)) {
        throw new CheckpointError(`outputs reference unknown layer '${name}'`);
      }
    }
    metadata.box_outputs = ckpt.outputs!.boxes.map((n) => `${n}.out`).join(",");
    metadata.class_outputs = ckpt.outputs!.classes.map((n) => `${n}.out`).join(",");
    metadata.anchor_config = JSON.stringify({
      maps: ckpt.anchors!.maps.map((m) => ({ grid: m.grid, scales: m.scales, ratios: m.ratios })),
      box_coder: ckpt.anchors!.box_coder,
    });
  } else {
    if (!index.has(`${ckpt.logit_output}.out`)) {
      throw new CheckpointError(`logit_output references unknown layer '${ckpt.logit_output}'`);
    }
    metadata.logit_output = `${ckpt.logit_output}.out`;
  }

  const graph: QuantGraph = { tensors, ops, metadata, inputIndex: inputIdx, index };
  return { bytes: writeQmdl(tensors, ops, metadata), graph };
}

function quantizeU8(values: Float64Array, qp: QuantParams): Uint8Array {
  const out = new Uint8Array(values.length);
  for (let i = 0; i < values.length; i++) {
    const q = roundHalfAway(values[i] / qp.scale) + qp.zeroPoint;
    out[i] = Math.min(255, Math.max(0, q));
  }
  return out;
}

function quantizeBias(values: Float64Array, scale: number): Int32Array {
  const out = new Int32Array(values.length);
  for (let i = 0; i < values.length; i++) {
    const q = roundHalfAway(values[i] / scale);
    out[i] = Math.min(2147483647, Math.max(-2147483648, q));
  }
  return out;
}
