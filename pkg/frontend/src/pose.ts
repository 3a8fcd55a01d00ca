/**
 * 3x4 pose arithmetic for staging edits and moving the camera.
 *
 * This is intent math only: composing rotations and translating positions.
 * No ray, color, or pixel ever originates here; the service renders.
 */

import type { Pose34 } from "./types.js";

export type Vec3 = [number, number, number];
export type Mat3 = number[][];

export const IDENTITY_POSE: Pose34 = [
  [1, 0, 0, 0],
  [0, 1, 0, 0],
  [0, 0, 1, 0],
];

export function rotationOf(pose: Pose34): Mat3 {
  return pose.map((row) => row.slice(0, 3));
}

export function translationOf(pose: Pose34): Vec3 {
  return [pose[0][3], pose[1][3], pose[2][3]];
}

export function compose(rotation: Mat3, translation: Vec3): Pose34 {
  return rotation.map((row, i) => [...row, translation[i]]);
}

export function matmul(a: Mat3, b: Mat3): Mat3 {
  return a.map((row) =>
    [0, 1, 2].map((j) => row[0] * b[0][j] + row[1] * b[1][j] + row[2] * b[2][j]),
  );
}

export function matvec(a: Mat3, v: Vec3): Vec3 {
  return [0, 1, 2].map((i) => a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2]) as Vec3;
}

export function addVec(a: Vec3, b: Vec3): Vec3 {
  return [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
}

export function subVec(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

/** Rotation of `degrees` about a principal world axis. */
export function axisRotation(axis: "x" | "y" | "z", degrees: number): Mat3 {
  const a = (degrees * Math.PI) / 180;
  const c = Math.cos(a);
  const s = Math.sin(a);
  if (axis === "x") {
    return [
      [1, 0, 0],
      [0, c, -s],
      [0, s, c],
    ];
  }
  if (axis === "y") {
    return [
      [c, 0, s],
      [0, 1, 0],
      [-s, 0, c],
    ];
  }
  return [
    [c, -s, 0],
    [s, c, 0],
    [0, 0, 1],
  ];
}

/**
 * Spin an object pose in place: rotate its orientation about a world axis
 * through its own center, keeping the translation fixed.
 */
export function rotateInPlace(pose: Pose34, axis: "x" | "y" | "z", degrees: number): Pose34 {
  const spin = axisRotation(axis, degrees);
  return compose(matmul(spin, rotationOf(pose)), translationOf(pose));
}

/** Shift a pose by a world-frame offset. */
export function translate(pose: Pose34, offset: Vec3): Pose34 {
  return compose(rotationOf(pose), addVec(translationOf(pose), offset));
}

export interface CameraDelta {
  /** Steps along the camera's own axes: right, down, forward (view units). */
  move?: Vec3;
  /** Yaw about the world up axis, degrees; positive turns left. */
  yaw?: number;
  /** Pitch about the camera's right axis, degrees; positive looks up. */
  pitch?: number;
}

/**
 * Apply a roam delta to a camera-to-world pose.
 *
 * Movement is in the camera frame (column axes of the rotation); yaw spins
 * about world z through the camera position so the horizon stays level.
 */
export function roam(pose: Pose34, delta: CameraDelta): Pose34 {
  let rot = rotationOf(pose);
  let pos = translationOf(pose);
  if (delta.move) {
    const [r, d, f] = delta.move;
    const step: Vec3 = [
      rot[0][0] * r + rot[0][1] * d + rot[0][2] * f,
      rot[1][0] * r + rot[1][1] * d + rot[1][2] * f,
      rot[2][0] * r + rot[2][1] * d + rot[2][2] * f,
    ];
    pos = addVec(pos, step);
  }
  if (delta.yaw) {
    rot = matmul(axisRotation("z", delta.yaw), rot);
  }
  if (delta.pitch) {
    const right = [rot[0][0], rot[1][0], rot[2][0]] as Vec3;
    rot = matmul(axisAngle(right, (delta.pitch * Math.PI) / 180), rot);
  }
  return compose(rot, pos);
}

/** Rodrigues rotation about a unit axis. */
export function axisAngle(axis: Vec3, radians: number): Mat3 {
  const [x, y, z] = axis;
  const c = Math.cos(radians);
  const s = Math.sin(radians);
  const t = 1 - c;
  return [
    [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
    [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
    [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
  ];
}

/**
 * Re-orthonormalize a rotation with one Gram-Schmidt pass.
 *
 * Chained 64-bit roam steps drift a few ulps per click; the service rejects
 * anything past 1e-6, so poses are squared up before every send.
 */
export function orthonormalize(rot: Mat3): Mat3 {
  const col = (j: number): Vec3 => [rot[0][j], rot[1][j], rot[2][j]];
  const norm = (v: Vec3): Vec3 => {
    const n = Math.hypot(v[0], v[1], v[2]);
    return [v[0] / n, v[1] / n, v[2] / n];
  };
  const dot = (a: Vec3, b: Vec3) => a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
  const x = norm(col(0));
  const y0 = col(1);
  const proj = dot(x, y0);
  const y = norm([y0[0] - proj * x[0], y0[1] - proj * x[1], y0[2] - proj * x[2]]);
  const z: Vec3 = [
    x[1] * y[2] - x[2] * y[1],
    x[2] * y[0] - x[0] * y[2],
    x[0] * y[1] - x[1] * y[0],
  ];
  return [
    [x[0], y[0], z[0]],
    [x[1], y[1], z[1]],
    [x[2], y[2], z[2]],
  ];
}

export function squareUp(pose: Pose34): Pose34 {
  return compose(orthonormalize(rotationOf(pose)), translationOf(pose));
}
