/**
 * Reference integer runtime over an exported quantized graph: the oracle the
 * round-trip tests compare against the engine.  Arithmetic follows the
 * engine's documented semantics exactly: same-padding with the input zero
 * point, 32-bit accumulators, fixed-point requantization rounding half away
 * from zero, and the shared 2^20 grid for the residual add.
 */

import { QuantGraph } from "./export.js";
import { QmdlOp, QmdlTensor } from "./qmdl.js";
import {
  computeMultiplier,
  fitAccumulator,
  quantizeValue,
  requantize,
  roundHalfAway,
  scaleByMultiplier,
} from "./quantize.js";

export interface RgbImage {
  width: number;
  height: number;
  data: Uint8Array; // RGB, row-major
}

export interface ActivationTensor {
  shape: number[];
  values: Uint8Array;
}

/** Normalize pixels via x / 127.5 - 1 and push them through the input
 * tensor's quantization; the image must match the model resolution. */
export function preprocess(image: RgbImage, graph: QuantGraph): Uint8Array {
  const input = graph.tensors[graph.inputIndex];
  const [, h, w, c] = input.shape;
  if (image.height !== h || image.width !== w) {
    throw new Error(`probe image is ${image.height}x${image.width}, model expects ${h}x${w}`);
  }
  const out = new Uint8Array(h * w * c);
  const qp = { scale: input.scale, zeroPoint: input.zeroPoint };
  for (let i = 0; i < out.length; i++) {
    out[i] = quantizeValue(image.data[i] / 127.5 - 1.0, qp);
  }
  return out;
}

function actWindow(activation: QmdlOp["activation"], t: QmdlTensor): [number, number] {
  const qp = { scale: t.scale, zeroPoint: t.zeroPoint };
  if (activation === "relu6") return [t.zeroPoint, quantizeValue(6.0, qp)];
  if (activation === "relu") return [t.zeroPoint, 255];
  return [0, 255];
}

function samePad(size: number, k: number, stride: number): number {
  const out = Math.ceil(size / stride);
  return Math.max((out - 1) * stride + k - size, 0);
}

export function runQuantGraph(graph: QuantGraph, inputValues: Uint8Array): Map<string, ActivationTensor> {
  const values = new Map<number, ActivationTensor>();
  const inputTensor = graph.tensors[graph.inputIndex];
  values.set(graph.inputIndex, { shape: inputTensor.shape, values: inputValues });

  const fetch = (idx: number): ActivationTensor => {
    const t = graph.tensors[idx];
    if (t.data) return { shape: t.shape, values: t.data as Uint8Array };
    const v = values.get(idx);
    if (!v) throw new Error(`tensor ${t.name} consumed before production`);
    return v;
  };

  for (const op of graph.ops) {
    const outT = graph.tensors[op.outputs[0]];
    let result: ActivationTensor;
    if (op.opcode === "conv2d" || op.opcode === "depthwise_conv2d") {
      result = conv(graph, op, fetch(op.inputs[0]));
    } else if (op.opcode === "dense") {
      result = dense(graph, op, fetch(op.inputs[0]));
    } else if (op.opcode === "avg_pool2d") {
      result = avgPool(outT, fetch(op.inputs[0]));
    } else if (op.opcode === "flatten") {
      result = { shape: outT.shape, values: fetch(op.inputs[0]).values };
    } else if (op.opcode === "add") {
      result = add(graph, op, fetch(op.inputs[0]), fetch(op.inputs[1]));
    } else {
      throw new Error(`runtime does not implement ${op.opcode}`);
    }
    values.set(op.outputs[0], result);
  }

  const byName = new Map<string, ActivationTensor>();
  for (const [idx, v] of values) byName.set(graph.tensors[idx].name, v);
  return byName;
}

function conv(graph: QuantGraph, op: QmdlOp, x: ActivationTensor): ActivationTensor {
  const wT = graph.tensors[op.inputs[1]];
  const bT = graph.tensors[op.inputs[2]];
  const xT = graph.tensors[op.inputs[0]];
  const outT = graph.tensors[op.outputs[0]];
  const depthwise = op.opcode === "depthwise_conv2d";
  const [, h, w, ci] = x.shape;
  const [kh, kw] = wT.shape;
  const stride = op.strideH;
  const weights = wT.data as Uint8Array;
  const bias = bT.data as Int32Array;
  const zi = xT.zeroPoint;
  const zw = wT.zeroPoint;

  let padTop = 0;
  let padLeft = 0;
  let oh: number;
  let ow: number;
  if (op.padding === "same") {
    oh = Math.ceil(h / stride);
    ow = Math.ceil(w / stride);
    padTop = Math.floor(samePad(h, kh, stride) / 2);
    padLeft = Math.floor(samePad(w, kw, stride) / 2);
  } else {
    oh = Math.floor((h - kh) / stride) + 1;
    ow = Math.floor((w - kw) / stride) + 1;
  }
  const co = depthwise ? wT.shape[2] * wT.shape[3] : wT.shape[3];
  const mult = depthwise ? wT.shape[3] : 1;
  const fpm = computeMultiplier((xT.scale * wT.scale) / outT.scale);
  const [actMin, actMax] = actWindow(op.activation, outT);

  const out = new Uint8Array(oh * ow * co);
  const pixel = (y: number, xx: number, c: number): number => {
    if (y < 0 || y >= h || xx < 0 || xx >= w) return zi; // same-padding = real zero
    return x.values[(y * w + xx) * ci + c];
  };

  for (let oy = 0; oy < oh; oy++) {
    for (let ox = 0; ox < ow; ox++) {
      for (let oc = 0; oc < co; oc++) {
        let acc = 0;
        for (let dy = 0; dy < kh; dy++) {
          for (let dx = 0; dx < kw; dx++) {
            const iy = oy * stride + dy - padTop;
            const ix = ox * stride + dx - padLeft;
            if (depthwise) {
              const c = Math.floor(oc / mult);
              const m = oc % mult;
              const wv = weights[((dy * kw + dx) * ci + c) * mult + m] - zw;
              acc += (pixel(iy, ix, c) - zi) * wv;
            } else {
              for (let c = 0; c < ci; c++) {
                const wv = weights[((dy * kw + dx) * ci + c) * co + oc] - zw;
                acc += (pixel(iy, ix, c) - zi) * wv;
              }
            }
          }
        }
        acc = fitAccumulator(acc + bias[oc]);
        out[(oy * ow + ox) * co + oc] = requantize(acc, fpm, outT.zeroPoint, actMin, actMax);
      }
    }
  }
  return { shape: [1, oh, ow, co], values: out };
}

function dense(graph: QuantGraph, op: QmdlOp, x: ActivationTensor): ActivationTensor {
  const wT = graph.tensors[op.inputs[1]];
  const bT = graph.tensors[op.inputs[2]];
  const xT = graph.tensors[op.inputs[0]];
  const outT = graph.tensors[op.outputs[0]];
  const [features, units] = wT.shape;
  const weights = wT.data as Uint8Array;
  const bias = bT.data as Int32Array;
  const fpm = computeMultiplier((xT.scale * wT.scale) / outT.scale);
  const [actMin, actMax] = actWindow(op.activation, outT);
  const out = new Uint8Array(units);
  for (let u = 0; u < units; u++) {
    let acc = 0;
    for (let f = 0; f < features; f++) {
      acc += (x.values[f] - xT.zeroPoint) * (weights[f * units + u] - wT.zeroPoint);
    }
    acc = fitAccumulator(acc + bias[u]);
    out[u] = requantize(acc, fpm, outT.zeroPoint, actMin, actMax);
  }
  return { shape: [1, units], values: out };
}

function avgPool(outT: QmdlTensor, x: ActivationTensor): ActivationTensor {
  const [, h, w, c] = x.shape;
  const count = h * w;
  const out = new Uint8Array(c);
  for (let ch = 0; ch < c; ch++) {
    let sum = 0;
    for (let i = 0; i < count; i++) sum += x.values[i * c + ch];
    out[ch] = Math.floor((2 * sum + count) / (2 * count)); // round half away, sums >= 0
  }
  return { shape: [1, 1, 1, c], values: out };
}

function add(graph: QuantGraph, op: QmdlOp, a: ActivationTensor, b: ActivationTensor): ActivationTensor {
  const aT = graph.tensors[op.inputs[0]];
  const bT = graph.tensors[op.inputs[1]];
  const outT = graph.tensors[op.outputs[0]];
  const twiceMax = 2 * Math.max(aT.scale, bT.scale);
  const fa = computeMultiplier(aT.scale / twiceMax);
  const fb = computeMultiplier(bT.scale / twiceMax);
  const fo = computeMultiplier(twiceMax / (2 ** 20 * outT.scale));
  const out = new Uint8Array(a.values.length);
  for (let i = 0; i < out.length; i++) {
    const xa = (a.values[i] - aT.zeroPoint) * 2 ** 20;
    const xb = (b.values[i] - bT.zeroPoint) * 2 ** 20;
    const raw = fitAccumulator(scaleByMultiplier(xa, fa) + scaleByMultiplier(xb, fb));
    out[i] = requantize(raw, fo, outT.zeroPoint);
  }
  return { shape: a.shape, values: out };
}

/** Convenience wrapper: preprocess + execute, keyed by tensor name. */
export function runOnImage(graph: QuantGraph, image: RgbImage): Map<string, ActivationTensor> {
  return runQuantGraph(graph, preprocess(image, graph));
}

export { roundHalfAway };
