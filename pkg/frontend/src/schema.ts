/**
 * Client-side validation of edit scripts.
 *
 * The service validates everything again; this layer exists so a malformed
 * edit never leaves the browser, and so error messages point at the exact
 * offending entry the same way the service's do.
 */

import type { EditOp, EditScript, Pose34 } from "./types.js";

const EDIT_FIELDS = new Set(["op", "node", "frame", "pose", "box", "class"]);

export class SchemaError extends Error {}

function isPlainObject(v: unknown): v is Record<string, unknown> {
  return typeof v === "object" && v !== null && !Array.isArray(v);
}

function checkPose(value: unknown, where: string): Pose34 {
  if (!Array.isArray(value) || value.length !== 3) {
    throw new SchemaError(`${where}: pose must be a 3x4 matrix`);
  }
  for (const row of value) {
    if (!Array.isArray(row) || row.length !== 4) {
      throw new SchemaError(`${where}: pose must be a 3x4 matrix`);
    }
    for (const v of row) {
      if (typeof v !== "number" || !Number.isFinite(v)) {
        throw new SchemaError(`${where}: pose entries must be finite numbers`);
      }
    }
  }
  // the service rejects non-orthonormal rotations; catch it before the trip
  const r = value as number[][];
  for (let i = 0; i < 3; i++) {
    for (let j = 0; j < 3; j++) {
      let dot = 0;
      for (let k = 0; k < 3; k++) dot += r[k][i] * r[k][j];
      const want = i === j ? 1 : 0;
      if (Math.abs(dot - want) > 1e-5) {
        throw new SchemaError(`${where}: rotation must be orthonormal`);
      }
    }
  }
  return value as Pose34;
}

function checkFrame(op: Record<string, unknown>, where: string): number {
  const frame = op.frame;
  if (typeof frame !== "number" || !Number.isInteger(frame)) {
    throw new SchemaError(`${where}: integer 'frame' required`);
  }
  return frame;
}

function checkNode(op: Record<string, unknown>, where: string): string {
  const node = op.node;
  if (typeof node !== "string" || node.length === 0) {
    throw new SchemaError(`${where}: 'node' must be a non-empty string`);
  }
  return node;
}

function checkOne(raw: unknown, where: string): EditOp {
  if (!isPlainObject(raw)) {
    throw new SchemaError(`${where}: each op must be an object`);
  }
  const extra = Object.keys(raw).filter((k) => !EDIT_FIELDS.has(k));
  if (extra.length) {
    throw new SchemaError(`${where}: unknown fields ${JSON.stringify(extra.sort())}`);
  }
  const kind = raw.op;
  if (kind === "set_pose") {
    return {
      op: "set_pose",
      node: checkNode(raw, where),
      frame: checkFrame(raw, where),
      pose: checkPose(raw.pose, where),
    };
  }
  if (kind === "remove") {
    return { op: "remove", node: checkNode(raw, where) };
  }
  if (kind === "insert") {
    const cls = raw.class;
    if (typeof cls !== "string" || cls.length === 0) {
      throw new SchemaError(`${where}: 'insert' needs a string 'class'`);
    }
    const box = raw.box;
    if (
      !Array.isArray(box) ||
      box.length !== 3 ||
      box.some((v) => typeof v !== "number" || !(v > 0))
    ) {
      throw new SchemaError(`${where}: 'insert' needs a positive (L, H, W) 'box'`);
    }
    const node = raw.node;
    if (node !== undefined && node !== null && typeof node !== "string") {
      throw new SchemaError(`${where}: 'node' must be a string id`);
    }
    return {
      op: "insert",
      class: cls,
      node: node ?? null,
      box: box as [number, number, number],
      frame: checkFrame(raw, where),
      pose: checkPose(raw.pose, where),
    };
  }
  throw new SchemaError(`${where}: unknown op ${JSON.stringify(kind)}`);
}

/** Validate a whole script; returns the typed ops or throws SchemaError. */
export function validateEditScript(doc: unknown): EditScript {
  if (!isPlainObject(doc) || !Array.isArray(doc.ops)) {
    throw new SchemaError("edit script must be an object with an 'ops' list");
  }
  return { ops: doc.ops.map((op, i) => checkOne(op, `ops[${i}]`)) };
}
