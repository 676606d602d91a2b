/**
 * QMDL binary writer, byte-for-byte against the engine's documented format
 * (docs/qmdl-format.md in the engine repository): little-endian header,
 * sorted metadata, tensor table, fixed 34-byte op records, data blob.
 * Output is deterministic for a given graph.
 */

export type DType = "u8" | "i32" | "f32";

export interface QmdlTensor {
  name: string;
  dtype: DType;
  shape: number[];
  scale: number;
  zeroPoint: number;
  data?: Uint8Array | Int32Array | Float32Array;
}

export interface QmdlOp {
  opcode: "conv2d" | "depthwise_conv2d" | "avg_pool2d" | "dense" | "relu6" | "add" | "flatten";
  strideH: number;
  strideW: number;
  padding: "same" | "valid";
  activation: "none" | "relu" | "relu6";
  extra: number;
  inputs: number[];
  outputs: number[];
}

const DTYPE_CODES: Record<DType, number> = { u8: 0, i32: 1, f32: 2 };
const OPCODES: Record<QmdlOp["opcode"], number> = {
  conv2d: 1, depthwise_conv2d: 2, avg_pool2d: 3, dense: 4, relu6: 5, add: 6, flatten: 7,
};
const PADDING_CODES = { same: 0, valid: 1 } as const;
const ACTIVATION_CODES = { none: 0, relu: 1, relu6: 2 } as const;
const MAX_INPUTS = 4;
const MAX_OUTPUTS = 2;

function tensorBytes(t: QmdlTensor): Buffer {
  if (!t.data) return Buffer.alloc(0);
  if (t.data instanceof Uint8Array) return Buffer.from(t.data);
  return Buffer.from(t.data.buffer, t.data.byteOffset, t.data.byteLength);
}

export function writeQmdl(
  tensors: QmdlTensor[],
  ops: QmdlOp[],
  metadata: Record<string, string>,
): Buffer {
  const chunks: Buffer[] = [];
  const push = (b: Buffer) => chunks.push(b);
  const u16 = (v: number) => { const b = Buffer.alloc(2); b.writeUInt16LE(v); push(b); };
  const u32 = (v: number) => { const b = Buffer.alloc(4); b.writeUInt32LE(v); push(b); };
  const i32 = (v: number) => { const b = Buffer.alloc(4); b.writeInt32LE(v); push(b); };
  const u64 = (v: number) => { const b = Buffer.alloc(8); b.writeBigUInt64LE(BigInt(v)); push(b); };
  const f64 = (v: number) => { const b = Buffer.alloc(8); b.writeDoubleLE(v); push(b); };
  const u8 = (v: number) => { push(Buffer.from([v])); };

  push(Buffer.from("QMDL", "ascii"));
  u16(1); // version
  u16(0); // flags

  const meta = Object.entries(metadata).sort(([a], [b]) => (a < b ? -1 : a > b ? 1 : 0));
  u32(meta.length);
  for (const [key, value] of meta) {
    const kb = Buffer.from(key, "utf-8");
    const vb = Buffer.from(value, "utf-8");
    u16(kb.length); push(kb);
    u16(vb.length); push(vb);
  }

  const blobs: Buffer[] = [];
  let blobLen = 0;
  u32(tensors.length);
  for (const t of tensors) {
    const nb = Buffer.from(t.name, "utf-8");
    u16(nb.length); push(nb);
    u8(DTYPE_CODES[t.dtype]);
    u8(t.shape.length);
    for (const d of t.shape) u32(d);
    f64(t.scale);
    i32(t.zeroPoint);
    const raw = tensorBytes(t);
    if (raw.length === 0) {
      u64(0); u64(0);
    } else {
      const expected = t.shape.reduce((a, b) => a * b, 1) * (t.dtype === "u8" ? 1 : 4);
      if (raw.length !== expected) {
        throw new Error(`tensor ${t.name}: ${raw.length} data bytes but shape needs ${expected}`);
      }
      u64(raw.length); u64(blobLen);
      blobs.push(raw);
      blobLen += raw.length;
    }
  }

  u32(ops.length);
  for (const op of ops) {
    u16(OPCODES[op.opcode]);
    u8(op.strideH); u8(op.strideW);
    u8(PADDING_CODES[op.padding]);
    u8(ACTIVATION_CODES[op.activation]);
    i32(op.extra);
    for (let i = 0; i < MAX_INPUTS; i++) i32(i < op.inputs.length ? op.inputs[i] : -1);
    for (let i = 0; i < MAX_OUTPUTS; i++) i32(i < op.outputs.length ? op.outputs[i] : -1);
  }

  u64(blobLen);
  for (const b of blobs) push(b);
  return Buffer.concat(chunks);
}
