/**
 * Writer/reader for the engine's named-tensor container (.grft).
 *
 * Layout (little-endian): magic "GRFT", version u32, count u32, then per
 * tensor: name (u16 length + UTF-8), dtype u8 (0 = f32, 1 = f64, 2 = i64),
 * rank u8, dims u64 each, raw payload.
 */

export type GrftDtype = 0 | 1 | 2;

export interface GrftTensor {
  dtype: GrftDtype;
  shape: number[];
  data: Buffer;
}

const MAGIC = Buffer.from("GRFT", "latin1");
const VERSION = 1;

export function grftItemSize(dtype: GrftDtype): number {
  return dtype === 0 ? 4 : 8;
}

export function writeGrft(tensors: Map<string, GrftTensor>): Buffer {
  const chunks: Buffer[] = [];
  const head = Buffer.alloc(12);
  MAGIC.copy(head, 0);
  head.writeUInt32LE(VERSION, 4);
  head.writeUInt32LE(tensors.size, 8);
  chunks.push(head);
  for (const [name, t] of tensors) {
    const encoded = Buffer.from(name, "utf-8");
    const meta = Buffer.alloc(2 + encoded.length + 2 + 8 * t.shape.length);
    meta.writeUInt16LE(encoded.length, 0);
    encoded.copy(meta, 2);
    let p = 2 + encoded.length;
    meta.writeUInt8(t.dtype, p);
    meta.writeUInt8(t.shape.length, p + 1);
    p += 2;
    for (const dim of t.shape) {
      meta.writeBigUInt64LE(BigInt(dim), p);
      p += 8;
    }
    const expected =
      t.shape.reduce((a, b) => a * b, 1) * grftItemSize(t.dtype);
    if (t.data.length !== expected) {
      throw new Error(`tensor ${name}: payload ${t.data.length} != ${expected}`);
    }
    chunks.push(meta, t.data);
  }
  return Buffer.concat(chunks);
}

export function readGrft(buf: Buffer): Map<string, GrftTensor> {
  if (!buf.subarray(0, 4).equals(MAGIC)) {
    throw new Error("bad magic: not a grft container");
  }
  const version = buf.readUInt32LE(4);
  if (version !== VERSION) throw new Error(`unsupported version ${version}`);
  const count = buf.readUInt32LE(8);
  let p = 12;
  const out = new Map<string, GrftTensor>();
  for (let i = 0; i < count; i++) {
    const nameLen = buf.readUInt16LE(p);
    p += 2;
    const name = buf.subarray(p, p + nameLen).toString("utf-8");
    p += nameLen;
    const dtype = buf.readUInt8(p) as GrftDtype;
    const rank = buf.readUInt8(p + 1);
    p += 2;
    if (dtype !== 0 && dtype !== 1 && dtype !== 2) {
      throw new Error(`unknown dtype code ${dtype} for ${name}`);
    }
    const shape: number[] = [];
    for (let d = 0; d < rank; d++) {
      shape.push(Number(buf.readBigUInt64LE(p)));
      p += 8;
    }
    const bytes = shape.reduce((a, b) => a * b, 1) * grftItemSize(dtype);
    out.set(name, { dtype, shape, data: Buffer.from(buf.subarray(p, p + bytes)) });
    p += bytes;
  }
  return out;
}

export function f64Tensor(values: Float64Array | number[], shape: number[]): GrftTensor {
  const arr = values instanceof Float64Array ? values : Float64Array.from(values);
  return { dtype: 1, shape, data: Buffer.from(arr.buffer, arr.byteOffset, arr.length * 8) };
}

export function f32Tensor(values: Float32Array | number[], shape: number[]): GrftTensor {
  const arr = values instanceof Float32Array ? values : Float32Array.from(values);
  return { dtype: 0, shape, data: Buffer.from(arr.buffer, arr.byteOffset, arr.length * 4) };
}

export function i64Tensor(values: number[] | BigInt64Array, shape: number[]): GrftTensor {
  const arr =
    values instanceof BigInt64Array
      ? values
      : BigInt64Array.from(values.map((v) => BigInt(v)));
  return { dtype: 2, shape, data: Buffer.from(arr.buffer, arr.byteOffset, arr.length * 8) };
}
