/**
 * Wire types for the render service.
 *
 * These mirror the JSON the service produces and consumes; nothing here is
 * invented client-side. Poses are 3x4 row-major camera-to-world (or
 * object-to-world) matrices throughout.
 */

export type Pose34 = number[][];

export interface GraphNode {
  id: string;
  class: string;
  size: [number, number, number];
  decoder: string;
  track: Record<string, Pose34>;
}

export interface GraphDoc {
  version: string;
  intrinsics: number[][];
  camera_poses: Record<string, Pose34>;
  nodes: GraphNode[];
  checkpoint: string | null;
}

export interface SetPoseOp {
  op: "set_pose";
  node: string;
  frame: number;
  pose: Pose34;
}

export interface RemoveOp {
  op: "remove";
  node: string;
}

export interface InsertOp {
  op: "insert";
  class: string;
  /** Omitted means the service mints an id. */
  node?: string | null;
  box: [number, number, number];
  frame: number;
  pose: Pose34;
}

export type EditOp = SetPoseOp | RemoveOp | InsertOp;

export interface EditScript {
  ops: EditOp[];
}

export interface RenderRequest {
  pose: Pose34;
  frame: number;
  width: number;
  height: number;
  layers?: boolean;
}

export interface LayerImage {
  name: string;
  data: Uint8Array;
}

export interface RenderResult {
  revision: number;
  sequence: number | null;
  /** Single render, or the "full" part of a layered response. */
  image: Uint8Array;
  layers: LayerImage[];
}

export interface HealthInfo {
  status: string;
  revision?: number;
  checkpoint?: string;
}

export interface RevisionEntry {
  revision: number;
  ops: EditOp[] | null;
}
