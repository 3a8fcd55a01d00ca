/**
 * Top-down schematic of the scene: object boxes on a ground grid plus a
 * camera wedge. Deliberately not a 3D viewport; renders are explicit
 * snapshots from the service, and this map only shows where things stand.
 */

import { rotationOf, translationOf } from "./pose.js";
import type { Pose34 } from "./types.js";

export interface MapBox {
  id: string;
  pose: Pose34;
  size: [number, number, number];
  selected: boolean;
}

export interface MapScene {
  boxes: MapBox[];
  camera: Pose34;
}

export interface MapViewport {
  /** World x of the left edge and world y of the top edge. */
  originX: number;
  originY: number;
  /** Pixels per world meter. */
  scale: number;
}

/** World xy to canvas xy (y grows downward on canvas). */
export function worldToCanvas(vp: MapViewport, x: number, y: number): [number, number] {
  return [(x - vp.originX) * vp.scale, (vp.originY - y) * vp.scale];
}

export function canvasToWorld(vp: MapViewport, px: number, py: number): [number, number] {
  return [vp.originX + px / vp.scale, vp.originY - py / vp.scale];
}

/** Ground-plane corners of a box pose, for drawing and hit testing. */
export function footprint(pose: Pose34, size: [number, number, number]): [number, number][] {
  const rot = rotationOf(pose);
  const pos = translationOf(pose);
  const hx = size[0] / 2;
  const hy = size[1] / 2;
  const corners: [number, number][] = [
    [-hx, -hy],
    [hx, -hy],
    [hx, hy],
    [-hx, hy],
  ];
  return corners.map(([cx, cy]) => [
    pos[0] + rot[0][0] * cx + rot[0][1] * cy,
    pos[1] + rot[1][0] * cx + rot[1][1] * cy,
  ]);
}

export function insideFootprint(point: [number, number], poly: [number, number][]): boolean {
  // ray cast along +x; odd crossing count means inside
  let inside = false;
  for (let i = 0, j = poly.length - 1; i < poly.length; j = i++) {
    const [xi, yi] = poly[i];
    const [xj, yj] = poly[j];
    const crosses = yi > point[1] !== yj > point[1];
    if (crosses && point[0] < ((xj - xi) * (point[1] - yi)) / (yj - yi) + xi) {
      inside = !inside;
    }
  }
  return inside;
}

/** Fit the viewport so every box and the camera sit inside with a margin. */
export function fitViewport(scene: MapScene, widthPx: number, heightPx: number): MapViewport {
  const xs: number[] = [];
  const ys: number[] = [];
  for (const box of scene.boxes) {
    for (const [x, y] of footprint(box.pose, box.size)) {
      xs.push(x);
      ys.push(y);
    }
  }
  const cam = translationOf(scene.camera);
  xs.push(cam[0]);
  ys.push(cam[1]);
  if (!xs.length) return { originX: -5, originY: 5, scale: widthPx / 10 };
  const pad = 2.0;
  const minX = Math.min(...xs) - pad;
  const maxX = Math.max(...xs) + pad;
  const minY = Math.min(...ys) - pad;
  const maxY = Math.max(...ys) + pad;
  const scale = Math.min(widthPx / (maxX - minX), heightPx / (maxY - minY));
  return { originX: minX, originY: maxY, scale };
}

export class SchematicMap {
  private vp: MapViewport = { originX: -5, originY: 5, scale: 32 };

  constructor(
    private canvas: HTMLCanvasElement,
    private onPick: (id: string | null) => void,
  ) {
    canvas.addEventListener("click", (ev) => {
      const rect = canvas.getBoundingClientRect();
      this.onPick(this.pick(ev.clientX - rect.left, ev.clientY - rect.top));
    });
  }

  private scene: MapScene = { boxes: [], camera: [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]] };

  pick(px: number, py: number): string | null {
    const world = canvasToWorld(this.vp, px, py);
    for (const box of this.scene.boxes) {
      if (insideFootprint(world, footprint(box.pose, box.size))) return box.id;
    }
    return null;
  }

  draw(scene: MapScene): void {
    this.scene = scene;
    this.vp = fitViewport(scene, this.canvas.width, this.canvas.height);
    const ctx = this.canvas.getContext("2d");
    if (!ctx) return;
    const { width, height } = this.canvas;
    ctx.clearRect(0, 0, width, height);
    ctx.fillStyle = "#10141a";
    ctx.fillRect(0, 0, width, height);

    // meter grid
    ctx.strokeStyle = "#1f2733";
    ctx.lineWidth = 1;
    const x0 = Math.floor(this.vp.originX);
    const x1 = Math.ceil(this.vp.originX + width / this.vp.scale);
    for (let x = x0; x <= x1; x++) {
      const [px] = worldToCanvas(this.vp, x, 0);
      ctx.beginPath();
      ctx.moveTo(px, 0);
      ctx.lineTo(px, height);
      ctx.stroke();
    }
    const yTop = Math.ceil(this.vp.originY);
    const yBot = Math.floor(this.vp.originY - height / this.vp.scale);
    for (let y = yBot; y <= yTop; y++) {
      const [, py] = worldToCanvas(this.vp, 0, y);
      ctx.beginPath();
      ctx.moveTo(0, py);
      ctx.lineTo(width, py);
      ctx.stroke();
    }

    for (const box of scene.boxes) {
      const poly = footprint(box.pose, box.size).map(([x, y]) => worldToCanvas(this.vp, x, y));
      ctx.beginPath();
      ctx.moveTo(poly[0][0], poly[0][1]);
      for (const [px, py] of poly.slice(1)) ctx.lineTo(px, py);
      ctx.closePath();
      ctx.fillStyle = box.selected ? "rgba(255, 176, 32, 0.45)" : "rgba(90, 160, 255, 0.30)";
      ctx.strokeStyle = box.selected ? "#ffb020" : "#5aa0ff";
      ctx.lineWidth = box.selected ? 2 : 1;
      ctx.fill();
      ctx.stroke();
      ctx.fillStyle = "#c8d4e4";
      ctx.font = "11px system-ui, sans-serif";
      const center = footprint(box.pose, box.size).reduce(
        (acc, [x, y]) => [acc[0] + x / 4, acc[1] + y / 4],
        [0, 0],
      );
      const [cx, cy] = worldToCanvas(this.vp, center[0], center[1]);
      ctx.fillText(box.id, cx + 4, cy - 4);
    }

    // camera: a wedge pointing along the view direction's ground projection
    const rot = rotationOf(scene.camera);
    const cam = translationOf(scene.camera);
    const fwd = [rot[0][2], rot[1][2]];
    const n = Math.hypot(fwd[0], fwd[1]) || 1;
    const dir = [fwd[0] / n, fwd[1] / n];
    const side = [-dir[1], dir[0]];
    const tip = worldToCanvas(this.vp, cam[0] + dir[0] * 1.2, cam[1] + dir[1] * 1.2);
    const left = worldToCanvas(this.vp, cam[0] + side[0] * 0.4, cam[1] + side[1] * 0.4);
    const right = worldToCanvas(this.vp, cam[0] - side[0] * 0.4, cam[1] - side[1] * 0.4);
    ctx.beginPath();
    ctx.moveTo(tip[0], tip[1]);
    ctx.lineTo(left[0], left[1]);
    ctx.lineTo(right[0], right[1]);
    ctx.closePath();
    ctx.fillStyle = "rgba(120, 220, 120, 0.8)";
    ctx.fill();
  }
}
