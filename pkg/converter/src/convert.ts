/**
 * Archive-to-engine conversion.
 *
 * Body-model archives (v_template / shapedirs / weights / ...) become the
 * engine's model container; checkpoint archives (torch-style dotted names
 * with (out, in) linear weights) become the engine's weight container.
 * Detection is by key inspection; every mandatory engine tensor must be
 * produced or the conversion fails loudly.
 */

import {
  Dtype,
  Tensor,
  itemSize,
  numElements,
  readElement,
  toFloat64,
} from "./npz.js";
import { GrftTensor, f32Tensor, f64Tensor, i64Tensor } from "./grft.js";

export class MissingTensorError extends Error {
  constructor(public tensor: string) {
    super(`missing mandatory tensor: ${tensor}`);
    this.name = "MissingTensor";
  }
}

export class UnknownLayoutError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "UnknownLayout";
  }
}

export type Layout = "body-model" | "checkpoint";

export interface ConversionManifest {
  source: string;
  layout: Layout;
  renames: Record<string, string>;
  derived: string[];
  joints?: { total: number; frozen: number[] };
  output: string;
}

export function detectLayout(keys: Set<string>): Layout {
  if (keys.has("v_template") && keys.has("shapedirs") && keys.has("weights")) {
    return "body-model";
  }
  if ([...keys].some((k) => k.startsWith("layers.") || k.startsWith("config."))) {
    return "checkpoint";
  }
  throw new UnknownLayoutError(
    `cannot detect archive layout from keys: ${[...keys].sort().join(", ")}`
  );
}

// ---------------------------------------------------------------------------
// body model

const N_SHAPE = 10;
const N_SURFACE_PROBES = 27;

/** Convert any numeric tensor to an f64 grft tensor, preserving exact bytes
 * when the source is already f64. */
function asF64(t: Tensor): GrftTensor {
  if (t.dtype === "f8") {
    return { dtype: 1, shape: t.shape, data: t.data };
  }
  return f64Tensor(toFloat64(t), t.shape);
}

function asI64(t: Tensor): GrftTensor {
  if (t.dtype === "i8") {
    return { dtype: 2, shape: t.shape, data: t.data };
  }
  const n = numElements(t.shape);
  const vals = new BigInt64Array(n);
  for (let i = 0; i < n; i++) vals[i] = BigInt(Math.round(readElement(t, i)));
  return i64Tensor(vals, t.shape);
}

/** (V, 3, B) -> (10, V, 3), truncating to the first 10 shape coefficients.
 * Element bytes are moved, never recomputed, so f64 payloads stay exact. */
function transposeShapedirs(t: Tensor): GrftTensor {
  const [v, three, b] = t.shape;
  if (three !== 3 || b < N_SHAPE) {
    throw new UnknownLayoutError(
      `shapedirs must be (V, 3, B>=10), got (${t.shape.join(", ")})`
    );
  }
  const size = itemSize(t.dtype);
  const out = Buffer.alloc(N_SHAPE * v * 3 * size);
  for (let k = 0; k < N_SHAPE; k++) {
    for (let i = 0; i < v; i++) {
      for (let c = 0; c < 3; c++) {
        const src = ((i * 3 + c) * b + k) * size;
        const dst = ((k * v + i) * 3 + c) * size;
        t.data.copy(out, dst, src, src + size);
      }
    }
  }
  const moved: Tensor = { dtype: t.dtype, shape: [N_SHAPE, v, 3], data: out };
  return asF64(moved);
}

function parentsFrom(archive: Map<string, Tensor>): GrftTensor {
  const direct = archive.get("parents");
  if (direct) return asI64(direct);
  const kintree = archive.get("kintree_table");
  if (!kintree) throw new MissingTensorError("parents");
  const [rows, j] = kintree.shape;
  if (rows < 1) throw new UnknownLayoutError("empty kintree_table");
  const vals = new BigInt64Array(j);
  for (let i = 0; i < j; i++) {
    let p = readElement(kintree, i); // row 0 = parent ids
    if (i === 0 && (p > j || p < -1)) p = -1; // some archives mark the root with a sentinel
    vals[i] = BigInt(p);
  }
  return i64Tensor(vals, [j]);
}

function defaultJointRoles(j: number): number[] {
  const roles = new Array<number>(j).fill(4);
  roles[0] = 0;
  if (j === 52) {
    for (let i = 1; i <= 21; i++) roles[i] = 1;
    for (let i = 22; i <= 36; i++) roles[i] = 2;
    for (let i = 37; i <= 51; i++) roles[i] = 3;
  } else if (j === 55) {
    // full-body layout with jaw/eyes: freeze 22..24, hands at 25..54
    for (let i = 1; i <= 21; i++) roles[i] = 1;
    for (let i = 25; i <= 39; i++) roles[i] = 2;
    for (let i = 40; i <= 54; i++) roles[i] = 3;
  } else {
    throw new UnknownLayoutError(
      `cannot derive joint roles for ${j} joints (expected 52 or 55)`
    );
  }
  return roles;
}

/** Deterministic farthest-point sampling (start vertex 0). */
export function farthestPointSample(verts: Float64Array, count: number): number[] {
  const n = verts.length / 3;
  const chosen = [0];
  const dist = new Float64Array(n);
  const d2 = (a: number, b: number) => {
    const dx = verts[3 * a] - verts[3 * b];
    const dy = verts[3 * a + 1] - verts[3 * b + 1];
    const dz = verts[3 * a + 2] - verts[3 * b + 2];
    return Math.sqrt(dx * dx + dy * dy + dz * dz);
  };
  for (let i = 0; i < n; i++) dist[i] = d2(i, 0);
  while (chosen.length < count) {
    let best = 0;
    for (let i = 1; i < n; i++) if (dist[i] > dist[best]) best = i;
    chosen.push(best);
    for (let i = 0; i < n; i++) {
      const d = d2(i, best);
      if (d < dist[i]) dist[i] = d;
    }
  }
  return chosen;
}

/** Mixed-Voronoi per-vertex areas: cotangent weights on non-obtuse
 * triangles, area/2 at the obtuse corner and area/4 elsewhere. */
export function mixedVoronoiAreas(
  verts: Float64Array,
  faces: number[][]
): Float64Array {
  const n = verts.length / 3;
  const out = new Float64Array(n);
  const p = (i: number) => [verts[3 * i], verts[3 * i + 1], verts[3 * i + 2]];
  const sub = (a: number[], b: number[]) => [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
  const dot = (a: number[], b: number[]) => a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
  const cross = (a: number[], b: number[]) => [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
  for (const [i0, i1, i2] of faces) {
    const p0 = p(i0);
    const p1 = p(i1);
    const p2 = p(i2);
    const e0 = sub(p2, p1); // opposite vertex 0
    const e1 = sub(p0, p2);
    const e2 = sub(p1, p0);
    const doubleArea = Math.hypot(...cross(e2, [-e1[0], -e1[1], -e1[2]]));
    const area = 0.5 * doubleArea;
    const safe = Math.max(doubleArea, 1e-300);
    const cot0 = dot([-e1[0], -e1[1], -e1[2]], e2) / safe;
    const cot1 = dot([-e2[0], -e2[1], -e2[2]], e0) / safe;
    const cot2 = dot([-e0[0], -e0[1], -e0[2]], e1) / safe;
    const l0 = dot(e0, e0);
    const l1 = dot(e1, e1);
    const l2 = dot(e2, e2);
    let c0 = (l1 * cot1 + l2 * cot2) / 8;
    let c1 = (l2 * cot2 + l0 * cot0) / 8;
    let c2 = (l0 * cot0 + l1 * cot1) / 8;
    const obtuse = cot0 < 0 ? 0 : cot1 < 0 ? 1 : cot2 < 0 ? 2 : -1;
    if (obtuse >= 0) {
      c0 = obtuse === 0 ? area / 2 : area / 4;
      c1 = obtuse === 1 ? area / 2 : area / 4;
      c2 = obtuse === 2 ? area / 2 : area / 4;
    }
    out[i0] += c0;
    out[i1] += c1;
    out[i2] += c2;
  }
  return out;
}

const BODY_RENAMES: Record<string, string> = {
  v_template: "template_vertices",
  shapedirs: "shape_dirs",
  J_regressor: "joint_regressor",
  kintree_table: "parents",
  weights: "skin_weights",
  f: "faces",
  contact_vertex_ids: "contact_vertex_ids",
  surface_probe_ids: "surface_probe_ids",
  vertex_areas: "vertex_areas",
  joint_roles: "joint_roles",
  head_joint_id: "head_joint_id",
};

export function convertBodyModel(
  archive: Map<string, Tensor>,
  source: string,
  output: string
): { tensors: Map<string, GrftTensor>; manifest: ConversionManifest } {
  for (const key of ["v_template", "shapedirs", "J_regressor", "weights", "f"]) {
    if (!archive.has(key)) {
      throw new MissingTensorError(BODY_RENAMES[key] ?? key);
    }
  }
  if (!archive.has("contact_vertex_ids")) {
    throw new MissingTensorError("contact_vertex_ids");
  }
  const derived: string[] = [];
  const renames: Record<string, string> = {};
  const out = new Map<string, GrftTensor>();

  const template = archive.get("v_template")!;
  const nVerts = template.shape[0];
  out.set("template_vertices", asF64(template));
  renames["v_template"] = "template_vertices";
  out.set("shape_dirs", transposeShapedirs(archive.get("shapedirs")!));
  renames["shapedirs"] = "shape_dirs";
  out.set("joint_regressor", asF64(archive.get("J_regressor")!));
  renames["J_regressor"] = "joint_regressor";
  const parents = parentsFrom(archive);
  out.set("parents", parents);
  renames[archive.has("parents") ? "parents" : "kintree_table"] = "parents";
  out.set("skin_weights", asF64(archive.get("weights")!));
  renames["weights"] = "skin_weights";
  out.set("faces", asI64(archive.get("f")!));
  renames["f"] = "faces";
  out.set("contact_vertex_ids", asI64(archive.get("contact_vertex_ids")!));
  renames["contact_vertex_ids"] = "contact_vertex_ids";

  const templateF64 = toFloat64(template);
  if (archive.has("surface_probe_ids")) {
    out.set("surface_probe_ids", asI64(archive.get("surface_probe_ids")!));
    renames["surface_probe_ids"] = "surface_probe_ids";
  } else {
    out.set(
      "surface_probe_ids",
      i64Tensor(farthestPointSample(templateF64, N_SURFACE_PROBES), [N_SURFACE_PROBES])
    );
    derived.push("surface_probe_ids");
  }
  if (archive.has("vertex_areas")) {
    out.set("vertex_areas", asF64(archive.get("vertex_areas")!));
    renames["vertex_areas"] = "vertex_areas";
  } else {
    const facesT = archive.get("f")!;
    const faceList: number[][] = [];
    for (let i = 0; i < facesT.shape[0]; i++) {
      faceList.push([
        readElement(facesT, 3 * i),
        readElement(facesT, 3 * i + 1),
        readElement(facesT, 3 * i + 2),
      ]);
    }
    out.set(
      "vertex_areas",
      f64Tensor(mixedVoronoiAreas(templateF64, faceList), [nVerts])
    );
    derived.push("vertex_areas");
  }
  const nJoints = parents.shape[0];
  let roles: number[];
  if (archive.has("joint_roles")) {
    out.set("joint_roles", asI64(archive.get("joint_roles")!));
    renames["joint_roles"] = "joint_roles";
    const t = archive.get("joint_roles")!;
    roles = Array.from({ length: nJoints }, (_, i) => readElement(t, i));
  } else {
    roles = defaultJointRoles(nJoints);
    out.set("joint_roles", i64Tensor(roles, [nJoints]));
    derived.push("joint_roles");
  }
  if (archive.has("head_joint_id")) {
    out.set("head_joint_id", asI64(archive.get("head_joint_id")!));
    renames["head_joint_id"] = "head_joint_id";
  } else {
    out.set("head_joint_id", i64Tensor([15], []));
    derived.push("head_joint_id");
  }

  // match the engine's own tensor ordering so shared tensors (and, for
  // archives exported by the engine, the whole file) compare byte-equal
  const ordered = new Map<string, GrftTensor>();
  for (const name of [
    "template_vertices",
    "shape_dirs",
    "joint_regressor",
    "parents",
    "skin_weights",
    "faces",
    "contact_vertex_ids",
    "surface_probe_ids",
    "vertex_areas",
    "joint_roles",
    "head_joint_id",
  ]) {
    ordered.set(name, out.get(name)!);
  }
  validateBodyTensors(ordered);
  const frozen = roles
    .map((r, i) => (r === 4 ? i : -1))
    .filter((i) => i >= 0);
  return {
    tensors: ordered,
    manifest: {
      source,
      layout: "body-model",
      renames,
      derived,
      joints: { total: nJoints, frozen },
      output,
    },
  };
}

function validateBodyTensors(tensors: Map<string, GrftTensor>): void {
  const w = tensors.get("skin_weights")!;
  const [v, j] = w.shape;
  for (let i = 0; i < v; i++) {
    let sum = 0;
    for (let q = 0; q < j; q++) sum += w.data.readDoubleLE((i * j + q) * 8);
    if (Math.abs(sum - 1) > 1e-6) {
      throw new Error(`skin weight row ${i} sums to ${sum}, expected 1 within 1e-6`);
    }
  }
  const parents = tensors.get("parents")!;
  if (Number(parents.data.readBigInt64LE(0)) !== -1) {
    throw new Error("joint 0 must be the root (parent -1)");
  }
}

// ---------------------------------------------------------------------------
// checkpoint

/** torch-style Linear stores (out, in); the engine wants (in, out). */
function transpose2d(t: Tensor): GrftTensor {
  const [rows, cols] = t.shape;
  const out = new Float32Array(rows * cols);
  for (let r = 0; r < rows; r++) {
    for (let c = 0; c < cols; c++) {
      out[c * rows + r] = readElement(t, r * cols + c);
    }
  }
  return f32Tensor(out, [cols, rows]);
}

function asF32(t: Tensor): GrftTensor {
  if (t.dtype === "f4") return { dtype: 0, shape: t.shape, data: t.data };
  const n = numElements(t.shape);
  const vals = new Float32Array(n);
  for (let i = 0; i < n; i++) vals[i] = readElement(t, i);
  return f32Tensor(vals, t.shape);
}

const CONFIG_KEYS = [
  "width",
  "layers",
  "heads",
  "ffn_hidden",
  "fourier_freqs",
  "probe_hidden",
  "probe_dim",
  "head_hidden",
  "visual",
  "level_channels",
];

function mapCheckpointKey(key: string): { name: string; transpose: boolean } | null {
  const mlp = (src: string, dst: string): { name: string; transpose: boolean } | null => {
    // two-layer MLPs appear as <src>.0.* and <src>.2.* (GELU at index 1)
    const m = new RegExp(`^${src}\\.([02])\\.(weight|bias)$`).exec(key);
    if (!m) return null;
    const idx = m[1] === "0" ? 0 : 1;
    const leaf = m[2] === "weight" ? `w${idx}` : `b${idx}`;
    return { name: `${dst}/${leaf}`, transpose: m[2] === "weight" };
  };
  let r =
    mlp("probe_mlp", "probe_mlp") ??
    mlp("tokenizer\\.body", "tokenizer/body") ??
    mlp("tokenizer\\.hand", "tokenizer/hand") ??
    mlp("tokenizer\\.full", "tokenizer/full");
  if (r) return r;
  for (const head of ["body", "hand", "global", "translation", "shape", "scale"]) {
    r = mlp(`heads\\.${head}`, `heads/${head}`);
    if (r) return r;
  }
  let m = /^fourier\.(offset|normal|body_rel)\.B$/.exec(key);
  if (m) return { name: `fourier/${m[1]}`, transpose: false };
  m = /^layers\.(\d+)\.(self|cross)_attn\.(q|k|v|out)_proj\.(weight|bias)$/.exec(key);
  if (m) {
    const p = m[3] === "out" ? "o" : m[3];
    const leaf = m[4] === "weight" ? `w${p}` : `b${p}`;
    return {
      name: `layers/${m[1]}/${m[2]}/${leaf}`,
      transpose: m[4] === "weight",
    };
  }
  m = /^layers\.(\d+)\.norm_(self|cross|ffn)\.(weight|bias)$/.exec(key);
  if (m) {
    const leaf = m[3] === "weight" ? "gain" : "bias";
    return { name: `layers/${m[1]}/norm_${m[2]}/${leaf}`, transpose: false };
  }
  m = /^layers\.(\d+)\.ffn\.([02])\.(weight|bias)$/.exec(key);
  if (m) {
    const idx = m[2] === "0" ? 0 : 1;
    const leaf = m[3] === "weight" ? `w${idx}` : `b${idx}`;
    return { name: `layers/${m[1]}/ffn/${leaf}`, transpose: m[3] === "weight" };
  }
  m = /^final_norm\.(weight|bias)$/.exec(key);
  if (m) {
    return { name: `final_norm/${m[1] === "weight" ? "gain" : "bias"}`, transpose: false };
  }
  m = /^visual\.level_proj\.(\d)\.(weight|bias)$/.exec(key);
  if (m) {
    return {
      name: `visual/level${m[1]}/${m[2] === "weight" ? "w" : "b"}`,
      transpose: m[2] === "weight",
    };
  }
  m = /^visual\.fuse\.(weight|bias)$/.exec(key);
  if (m) {
    return { name: `visual/fuse/${m[1] === "weight" ? "w" : "b"}`, transpose: m[1] === "weight" };
  }
  if (key === "visual.stream_embed") {
    return { name: "visual/stream_embed", transpose: false };
  }
  return null;
}

export function convertCheckpoint(
  archive: Map<string, Tensor>,
  source: string,
  output: string
): { tensors: Map<string, GrftTensor>; manifest: ConversionManifest } {
  const out = new Map<string, GrftTensor>();
  const renames: Record<string, string> = {};
  for (const cfg of CONFIG_KEYS) {
    const t = archive.get(`config.${cfg}`);
    if (!t) throw new MissingTensorError(`config.${cfg}`);
    out.set(`arch/${cfg}`, asI64(t));
    renames[`config.${cfg}`] = `arch/${cfg}`;
  }
  for (const [key, tensor] of archive) {
    if (key.startsWith("config.")) continue;
    const mapped = mapCheckpointKey(key);
    if (!mapped) {
      throw new UnknownLayoutError(`unrecognized checkpoint tensor: ${key}`);
    }
    out.set(
      mapped.name,
      mapped.transpose ? transpose2d(tensor) : asF32(tensor)
    );
    renames[key] = mapped.name;
  }
  return {
    tensors: out,
    manifest: { source, layout: "checkpoint", renames, derived: [], output },
  };
}

export function convertArchive(
  archive: Map<string, Tensor>,
  source: string,
  output: string
): { tensors: Map<string, GrftTensor>; manifest: ConversionManifest } {
  const layout = detectLayout(new Set(archive.keys()));
  return layout === "body-model"
    ? convertBodyModel(archive, source, output)
    : convertCheckpoint(archive, source, output);
}
