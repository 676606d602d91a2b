/**
 * The source checkpoint format this exporter understands: a JSON document
 * with float32 weights (base64), optional unfolded batch-norm parameters,
 * recorded activation ranges, and torch-style OIHW weight layout.
 */

import { z } from "zod";

export const SUPPORTED_OPS = [
  "conv2d",
  "depthwise_conv2d",
  "avg_pool2d",
  "dense",
  "flatten",
  "add",
] as const;

const tensorSchema = z.object({
  shape: z.array(z.number().int().positive()),
  data: z.string(), // base64 little-endian float32
});

const batchNormSchema = z.object({
  gamma: z.string(),
  beta: z.string(),
  mean: z.string(),
  variance: z.string(),
  epsilon: z.number().positive(),
});

const layerSchema = z.object({
  name: z.string().min(1),
  type: z.string(),
  input: z.string(),
  residual: z.string().optional(), // second operand for add
  stride: z.number().int().positive().default(1),
  padding: z.enum(["same", "valid"]).default("same"),
  activation: z.enum(["none", "relu", "relu6"]).default("none"),
  weights: tensorSchema.optional(),
  bias: tensorSchema.optional(),
  batch_norm: batchNormSchema.optional(),
  output_range: z.tuple([z.number(), z.number()]),
});

const anchorsSchema = z.object({
  maps: z.array(z.object({
    grid: z.tuple([z.number().int().positive(), z.number().int().positive()]),
    scales: z.array(z.number().positive()).nonempty(),
    ratios: z.array(z.number().positive()).nonempty(),
  })).nonempty(),
  box_coder: z.tuple([z.number(), z.number(), z.number(), z.number()]),
});

export const checkpointSchema = z.object({
  format: z.literal("edgeckpt-v1"),
  kind: z.enum(["detector", "classifier"]),
  input: z.object({
    height: z.number().int().positive(),
    width: z.number().int().positive(),
    channels: z.literal(3),
    range: z.tuple([z.number(), z.number()]),
  }),
  class_names: z.array(z.string().min(1)).nonempty(),
  anchors: anchorsSchema.optional(),
  outputs: z.object({
    boxes: z.array(z.string()).nonempty(),
    classes: z.array(z.string()).nonempty(),
  }).optional(),
  logit_output: z.string().optional(),
  layers: z.array(layerSchema).nonempty(),
});

export type Checkpoint = z.infer<typeof checkpointSchema>;
export type CheckpointLayer = z.infer<typeof layerSchema>;

export class CheckpointError extends Error {}
export class UnsupportedOpError extends CheckpointError {}

export function decodeF32(b64: string): Float64Array {
  const buf = Buffer.from(b64, "base64");
  if (buf.length % 4 !== 0) {
    throw new CheckpointError(`float tensor payload has ${buf.length} bytes, not a multiple of 4`);
  }
  const out = new Float64Array(buf.length / 4);
  for (let i = 0; i < out.length; i++) {
    out[i] = buf.readFloatLE(i * 4);
  }
  return out;
}

export function encodeF32(values: ArrayLike<number>): string {
  const buf = Buffer.alloc(values.length * 4);
  for (let i = 0; i < values.length; i++) {
    buf.writeFloatLE(Math.fround(values[i]), i * 4);
  }
  return buf.toString("base64");
}

export function parseCheckpoint(text: string): Checkpoint {
  let raw: unknown;
  try {
    raw = JSON.parse(text);
  } catch (err) {
    throw new CheckpointError(`checkpoint is not valid JSON: ${(err as Error).message}`);
  }
  const parsed = checkpointSchema.safeParse(raw);
  if (!parsed.success) {
    const issue = parsed.error.issues[0];
    throw new CheckpointError(`invalid checkpoint: ${issue.path.join(".")}: ${issue.message}`);
  }
  const ckpt = parsed.data;
  for (const layer of ckpt.layers) {
    if (!(SUPPORTED_OPS as readonly string[]).includes(layer.type)) {
      throw new UnsupportedOpError(`unsupported op '${layer.type}' in layer '${layer.name}'`);
    }
  }
  if (ckpt.kind === "detector" && (!ckpt.anchors || !ckpt.outputs)) {
    throw new CheckpointError("detector checkpoints need 'anchors' and 'outputs'");
  }
  if (ckpt.kind === "classifier" && !ckpt.logit_output) {
    throw new CheckpointError("classifier checkpoints need 'logit_output'");
  }
  return ckpt;
}
