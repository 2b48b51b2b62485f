/**
 * Minimal .npz / .npy reader and writer.
 *
 * Reading walks the zip central directory (numpy's writers use data
 * descriptors, so local headers do not carry reliable sizes) and supports
 * stored and deflated entries. Only C-ordered little-endian arrays of
 * f32 / f64 / i32 / i64 are handled, which covers body-model and checkpoint
 * archives.
 */

import * as zlib from "node:zlib";

export type Dtype = "f4" | "f8" | "i4" | "i8";

export interface Tensor {
  dtype: Dtype;
  shape: number[];
  /** raw little-endian payload */
  data: Buffer;
}

export function numElements(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

export function itemSize(dtype: Dtype): number {
  return dtype === "f4" || dtype === "i4" ? 4 : 8;
}

export function toFloat64(t: Tensor): Float64Array {
  const n = numElements(t.shape);
  const out = new Float64Array(n);
  for (let i = 0; i < n; i++) out[i] = readElement(t, i);
  return out;
}

export function readElement(t: Tensor, i: number): number {
  switch (t.dtype) {
    case "f4":
      return t.data.readFloatLE(i * 4);
    case "f8":
      return t.data.readDoubleLE(i * 8);
    case "i4":
      return t.data.readInt32LE(i * 4);
    case "i8":
      return Number(t.data.readBigInt64LE(i * 8));
  }
}

// ---------------------------------------------------------------------------
// npy

const NPY_MAGIC = Buffer.from("\x93NUMPY", "latin1");

export function parseNpy(buf: Buffer): Tensor {
  if (!buf.subarray(0, 6).equals(NPY_MAGIC)) {
    throw new Error("not an npy payload");
  }
  const major = buf[6];
  let headerLen: number;
  let offset: number;
  if (major === 1) {
    headerLen = buf.readUInt16LE(8);
    offset = 10;
  } else {
    headerLen = buf.readUInt32LE(8);
    offset = 12;
  }
  const header = buf.subarray(offset, offset + headerLen).toString("latin1");
  const descr = /'descr':\s*'([^']+)'/.exec(header)?.[1];
  const fortran = /'fortran_order':\s*(True|False)/.exec(header)?.[1];
  const shapeText = /'shape':\s*\(([^)]*)\)/.exec(header)?.[1];
  if (!descr || !fortran || shapeText === undefined) {
    throw new Error(`unparsable npy header: ${header}`);
  }
  if (fortran === "True") {
    throw new Error("fortran-ordered arrays are not supported");
  }
  const match = /^[<|]([fi][48])$/.exec(descr);
  if (!match) {
    throw new Error(`unsupported dtype ${descr}`);
  }
  const dtype = match[1] as Dtype;
  const shape = shapeText
    .split(",")
    .map((s) => s.trim())
    .filter((s) => s.length > 0)
    .map((s) => parseInt(s, 10));
  const data = buf.subarray(offset + headerLen);
  const expected = numElements(shape) * itemSize(dtype);
  if (data.length < expected) {
    throw new Error(`npy payload truncated: ${data.length} < ${expected}`);
  }
  return { dtype, shape, data: Buffer.from(data.subarray(0, expected)) };
}

export function buildNpy(t: Tensor): Buffer {
  const descr = `<${t.dtype}`;
  const shape =
    t.shape.length === 1 ? `(${t.shape[0]},)` : `(${t.shape.join(", ")})`;
  let header = `{'descr': '${descr}', 'fortran_order': False, 'shape': ${shape}, }`;
  const unpadded = 10 + header.length + 1;
  header += " ".repeat((64 - (unpadded % 64)) % 64) + "\n";
  const head = Buffer.alloc(10 + header.length);
  NPY_MAGIC.copy(head, 0);
  head[6] = 1;
  head[7] = 0;
  head.writeUInt16LE(header.length, 8);
  head.write(header, 10, "latin1");
  return Buffer.concat([head, t.data]);
}

// ---------------------------------------------------------------------------
// zip (central-directory based)

const EOCD_SIG = 0x06054b50;
const CENTRAL_SIG = 0x02014b50;
const LOCAL_SIG = 0x04034b50;

export function readNpz(buf: Buffer): Map<string, Tensor> {
  let eocd = -1;
  for (let i = buf.length - 22; i >= 0; i--) {
    if (buf.readUInt32LE(i) === EOCD_SIG) {
      eocd = i;
      break;
    }
  }
  if (eocd < 0) throw new Error("not a zip archive (no end-of-central-directory)");
  const count = buf.readUInt16LE(eocd + 10);
  let p = buf.readUInt32LE(eocd + 16);
  const out = new Map<string, Tensor>();
  for (let e = 0; e < count; e++) {
    if (buf.readUInt32LE(p) !== CENTRAL_SIG) {
      throw new Error("corrupt central directory");
    }
    const method = buf.readUInt16LE(p + 10);
    const compressed = buf.readUInt32LE(p + 20);
    const nameLen = buf.readUInt16LE(p + 28);
    const extraLen = buf.readUInt16LE(p + 30);
    const commentLen = buf.readUInt16LE(p + 32);
    const localOffset = buf.readUInt32LE(p + 42);
    const name = buf.subarray(p + 46, p + 46 + nameLen).toString("utf-8");
    p += 46 + nameLen + extraLen + commentLen;

    if (buf.readUInt32LE(localOffset) !== LOCAL_SIG) {
      throw new Error(`corrupt local header for ${name}`);
    }
    const lNameLen = buf.readUInt16LE(localOffset + 26);
    const lExtraLen = buf.readUInt16LE(localOffset + 28);
    const dataStart = localOffset + 30 + lNameLen + lExtraLen;
    const raw = buf.subarray(dataStart, dataStart + compressed);
    let payload: Buffer;
    if (method === 0) {
      payload = Buffer.from(raw);
    } else if (method === 8) {
      payload = zlib.inflateRawSync(raw);
    } else {
      throw new Error(`unsupported zip compression method ${method}`);
    }
    const key = name.endsWith(".npy") ? name.slice(0, -4) : name;
    out.set(key, parseNpy(payload));
  }
  return out;
}

/** Stored (uncompressed) npz with fixed timestamps; byte-reproducible. */
export function writeNpz(entries: Map<string, Tensor>): Buffer {
  interface Central {
    name: Buffer;
    crc: number;
    size: number;
    offset: number;
  }
  const chunks: Buffer[] = [];
  const central: Central[] = [];
  let offset = 0;
  for (const [key, tensor] of entries) {
    const name = Buffer.from(key + ".npy", "utf-8");
    const payload = buildNpy(tensor);
    const crc = crc32(payload);
    const local = Buffer.alloc(30);
    local.writeUInt32LE(LOCAL_SIG, 0);
    local.writeUInt16LE(20, 4); // version needed
    local.writeUInt16LE(0, 6); // flags
    local.writeUInt16LE(0, 8); // stored
    local.writeUInt16LE(0, 10); // time
    local.writeUInt16LE(0x21, 12); // date: 1980-01-01
    local.writeUInt32LE(crc >>> 0, 14);
    local.writeUInt32LE(payload.length, 18);
    local.writeUInt32LE(payload.length, 22);
    local.writeUInt16LE(name.length, 26);
    local.writeUInt16LE(0, 28);
    chunks.push(local, name, payload);
    central.push({ name, crc: crc >>> 0, size: payload.length, offset });
    offset += local.length + name.length + payload.length;
  }
  const centralStart = offset;
  for (const c of central) {
    const hdr = Buffer.alloc(46);
    hdr.writeUInt32LE(CENTRAL_SIG, 0);
    hdr.writeUInt16LE(20, 4);
    hdr.writeUInt16LE(20, 6);
    hdr.writeUInt16LE(0, 8);
    hdr.writeUInt16LE(0, 10);
    hdr.writeUInt16LE(0, 12);
    hdr.writeUInt16LE(0x21, 14);
    hdr.writeUInt32LE(c.crc, 16);
    hdr.writeUInt32LE(c.size, 20);
    hdr.writeUInt32LE(c.size, 24);
    hdr.writeUInt16LE(c.name.length, 28);
    hdr.writeUInt32LE(c.offset, 42);
    chunks.push(hdr, c.name);
    offset += hdr.length + c.name.length;
  }
  const eocd = Buffer.alloc(22);
  eocd.writeUInt32LE(EOCD_SIG, 0);
  eocd.writeUInt16LE(central.length, 8);
  eocd.writeUInt16LE(central.length, 10);
  eocd.writeUInt32LE(offset - centralStart, 12);
  eocd.writeUInt32LE(centralStart, 16);
  chunks.push(eocd);
  return Buffer.concat(chunks);
}

function crc32(buf: Buffer): number {
  let crc = ~0;
  for (let i = 0; i < buf.length; i++) {
    crc ^= buf[i];
    for (let k = 0; k < 8; k++) {
      crc = (crc >>> 1) ^ (0xedb88320 & -(crc & 1));
    }
  }
  return ~crc >>> 0;
}
