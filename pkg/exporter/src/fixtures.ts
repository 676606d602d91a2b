/**
 * Seeded generators for test checkpoints and probe imagery.  The PRNG is the
 * same xorshift64* family the engine's fixtures use; streams are independent
 * but equally deterministic, so every test artifact is reproducible.
 */

import { Checkpoint, encodeF32 } from "./checkpoint.js";
import { RgbImage } from "./runtime.js";

const U64 = (1n << 64n) - 1n;
const MULT = 0x2545f4914f6cdd1dn;

export class XorShift64Star {
  private state: bigint;

  constructor(seed: number | bigint) {
    let s = BigInt(seed) & U64;
    if (s === 0n) s = 0x9e3779b97f4a7c15n;
    this.state = s;
  }

  nextU64(): bigint {
    let x = this.state;
    x ^= x >> 12n;
    x = (x ^ (x << 25n)) & U64;
    x ^= x >> 27n;
    this.state = x;
    return (x * MULT) & U64;
  }

  uniform(lo = 0, hi = 1): number {
    const u = Number(this.nextU64() >> 11n) / 2 ** 53;
    return lo + (hi - lo) * u;
  }

  array(n: number, lo: number, hi: number): Float64Array {
    const out = new Float64Array(n);
    for (let i = 0; i < n; i++) out[i] = this.uniform(lo, hi);
    return out;
  }

  int(lo: number, hi: number): number {
    return lo + Number(this.nextU64() % BigInt(hi - lo));
  }
}

function convTensor(rng: XorShift64Star, o: number, i: number, kh: number, kw: number, gain = 1.0) {
  const bound = gain * Math.sqrt(6 / (i * kh * kw));
  return {
    shape: [o, i, kh, kw],
    data: encodeF32(rng.array(o * i * kh * kw, -bound, bound)),
  };
}

function biasTensor(rng: XorShift64Star, o: number) {
  return { shape: [o], data: encodeF32(rng.array(o, -0.1, 0.1)) };
}

function batchNorm(rng: XorShift64Star, o: number) {
  return {
    gamma: encodeF32(rng.array(o, 0.7, 1.3)),
    beta: encodeF32(rng.array(o, -0.2, 0.2)),
    mean: encodeF32(rng.array(o, -0.3, 0.3)),
    variance: encodeF32(rng.array(o, 0.5, 1.5)),
    epsilon: 1e-5,
  };
}

/** Tiny detector over a 16x16 input with one 4x4 feature map: conv stem with
 * batch norm, an inverted-residual-style block with a residual add, a 2x2
 * reduction, and box/class heads. */
export function makeDetectorCheckpoint(seed: number): Checkpoint {
  const rng = new XorShift64Star(0xdec0de ^ seed);
  return {
    format: "edgeckpt-v1",
    kind: "detector",
    input: { height: 16, width: 16, channels: 3, range: [-1.0, 1.0] },
    class_names: ["mask", "nomask"],
    anchors: {
      maps: [{ grid: [4, 4], scales: [0.4], ratios: [1.0, 2.0, 0.5] }],
      box_coder: [10.0, 10.0, 5.0, 5.0],
    },
    outputs: { boxes: ["head_box"], classes: ["head_cls"] },
    layers: [
      {
        name: "stem", type: "conv2d", input: "image", stride: 2, padding: "same",
        activation: "relu6", weights: convTensor(rng, 8, 3, 3, 3),
        bias: biasTensor(rng, 8), batch_norm: batchNorm(rng, 8),
        output_range: [0.0, 6.0],
      },
      {
        name: "expand", type: "conv2d", input: "stem", stride: 1, padding: "same",
        activation: "relu6", weights: convTensor(rng, 16, 8, 1, 1),
        bias: biasTensor(rng, 16), output_range: [0.0, 6.0],
      },
      {
        name: "dw", type: "depthwise_conv2d", input: "expand", stride: 1, padding: "same",
        activation: "relu6", weights: convTensor(rng, 16, 1, 3, 3),
        bias: biasTensor(rng, 16), batch_norm: batchNorm(rng, 16),
        output_range: [0.0, 6.0],
      },
      {
        name: "project", type: "conv2d", input: "dw", stride: 1, padding: "same",
        activation: "none", weights: convTensor(rng, 8, 16, 1, 1),
        bias: biasTensor(rng, 8), output_range: [-4.0, 4.0],
      },
      {
        name: "block_add", type: "add", input: "stem", residual: "project",
        stride: 1, padding: "same", activation: "none", output_range: [-6.0, 8.0],
      },
      {
        name: "feat", type: "conv2d", input: "block_add", stride: 2, padding: "valid",
        activation: "relu6", weights: convTensor(rng, 16, 8, 2, 2),
        bias: biasTensor(rng, 16), output_range: [0.0, 6.0],
      },
      {
        name: "head_box", type: "conv2d", input: "feat", stride: 1, padding: "same",
        activation: "none", weights: convTensor(rng, 12, 16, 1, 1, 0.5),
        bias: biasTensor(rng, 12), output_range: [-4.0, 4.0],
      },
      {
        name: "head_cls", type: "conv2d", input: "feat", stride: 1, padding: "same",
        activation: "none", weights: convTensor(rng, 6, 16, 1, 1, 0.5),
        bias: biasTensor(rng, 6), output_range: [-6.0, 6.0],
      },
    ],
  };
}

/** Tiny mask/nomask classifier: stem, depthwise, projection, global average
 * pooling, flatten, a relu dense layer, and 2-unit logits. */
export function makeClassifierCheckpoint(seed: number): Checkpoint {
  const rng = new XorShift64Star(0xc1a55 ^ seed);
  const denseTensor = (units: number, features: number) => ({
    shape: [units, features],
    data: encodeF32(rng.array(units * features, -Math.sqrt(6 / features), Math.sqrt(6 / features))),
  });
  return {
    format: "edgeckpt-v1",
    kind: "classifier",
    input: { height: 16, width: 16, channels: 3, range: [-1.0, 1.0] },
    class_names: ["mask", "nomask"],
    logit_output: "logits",
    layers: [
      {
        name: "stem", type: "conv2d", input: "image", stride: 2, padding: "same",
        activation: "relu6", weights: convTensor(rng, 8, 3, 3, 3),
        bias: biasTensor(rng, 8), batch_norm: batchNorm(rng, 8),
        output_range: [0.0, 6.0],
      },
      {
        name: "dw", type: "depthwise_conv2d", input: "stem", stride: 2, padding: "same",
        activation: "relu6", weights: convTensor(rng, 8, 1, 3, 3),
        bias: biasTensor(rng, 8), output_range: [0.0, 6.0],
      },
      {
        name: "project", type: "conv2d", input: "dw", stride: 1, padding: "same",
        activation: "none", weights: convTensor(rng, 16, 8, 1, 1),
        bias: biasTensor(rng, 16), output_range: [-4.0, 4.0],
      },
      {
        name: "pool", type: "avg_pool2d", input: "project",
        stride: 1, padding: "same", activation: "none", output_range: [-4.0, 4.0],
      },
      {
        name: "flat", type: "flatten", input: "pool",
        stride: 1, padding: "same", activation: "none", output_range: [-4.0, 4.0],
      },
      {
        name: "hidden", type: "dense", input: "flat", stride: 1, padding: "same",
        activation: "relu", weights: denseTensor(32, 16),
        bias: biasTensor(rng, 32), output_range: [0.0, 8.0],
      },
      {
        name: "logits", type: "dense", input: "hidden", stride: 1, padding: "same",
        activation: "none", weights: denseTensor(2, 32),
        bias: biasTensor(rng, 2), output_range: [-8.0, 8.0],
      },
    ],
  };
}

/** Noise background with one bright square: enough structure to light up
 * detector heads without caring where. */
export function probeImage(seed: number, height = 16, width = 16): RgbImage {
  const rng = new XorShift64Star(0x1a6e5 ^ seed);
  const data = new Uint8Array(height * width * 3);
  for (let i = 0; i < height * width; i++) {
    const v = Math.round(rng.uniform(90, 160));
    data[i * 3] = v;
    data[i * 3 + 1] = Math.min(255, v + rng.int(0, 8));
    data[i * 3 + 2] = Math.max(0, v - rng.int(0, 8));
  }
  const size = rng.int(4, 7);
  const y0 = rng.int(0, height - size);
  const x0 = rng.int(0, width - size);
  for (let y = y0; y < y0 + size; y++) {
    for (let x = x0; x < x0 + size; x++) {
      const p = (y * width + x) * 3;
      data[p] = 250;
      data[p + 1] = 248;
      data[p + 2] = 246;
    }
  }
  return { width, height, data };
}
