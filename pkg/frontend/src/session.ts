/**
 * Editor session state: the single source of truth the panels render from.
 *
 * All pixels come from the service; the session only tracks intent (camera
 * pose, staged edits, selection) and the last response. The render pane and
 * the revision badge always change together because both read `lastRender`.
 */

import { ServiceClient, ServiceError } from "./api.js";
import type { CameraDelta } from "./pose.js";
import { IDENTITY_POSE, roam, rotateInPlace, squareUp, translate } from "./pose.js";
import { validateEditScript } from "./schema.js";
import type {
  EditOp,
  EditScript,
  GraphDoc,
  GraphNode,
  Pose34,
  RenderRequest,
  RenderResult,
  SetPoseOp,
} from "./types.js";
import type { Vec3 } from "./pose.js";

export interface SessionListener {
  onGraph?(doc: GraphDoc, revision: number): void;
  onRender?(result: RenderResult): void;
  onPending?(ops: EditOp[]): void;
  onSelect?(nodeId: string | null): void;
  onBusy?(busy: boolean): void;
  /** Non-blocking error surface; retry re-issues the failed intent. */
  onToast?(message: string, retry?: () => void): void;
}

export interface TransformIntent {
  rotate?: { axis: "x" | "y" | "z"; degrees: number };
  translate?: Vec3;
}

export class EditorSession {
  readonly client: ServiceClient;
  graph: GraphDoc | null = null;
  revision = -1;
  selected: string | null = null;
  pending: SetPoseOp[] = [];
  frame = 0;
  cameraPose: Pose34 = IDENTITY_POSE;
  fovDegrees = 60;
  renderWidth = 128;
  renderHeight = 96;
  showLayers = false;
  lastRender: RenderResult | null = null;

  private listener: SessionListener;
  private inflight = false;
  private dirty = false;

  constructor(baseUrl: string, listener: SessionListener = {}) {
    this.client = new ServiceClient(baseUrl);
    this.listener = listener;
  }

  /** Attach the UI after load; panels built around an existing session. */
  bind(listener: SessionListener): void {
    this.listener = listener;
  }

  /** Connect, pull the graph, and aim the camera at the first posed frame. */
  static async load(baseUrl: string, listener: SessionListener = {}): Promise<EditorSession> {
    const session = new EditorSession(baseUrl, listener);
    await session.refreshGraph();
    const doc = session.graph!;
    const frames = Object.keys(doc.camera_poses)
      .map(Number)
      .sort((a, b) => a - b);
    if (frames.length) {
      session.frame = frames[0];
      session.cameraPose = doc.camera_poses[String(frames[0])];
    }
    const fx = doc.intrinsics[0][0];
    const cx = doc.intrinsics[0][2];
    session.fovDegrees = (2 * Math.atan(cx / fx) * 180) / Math.PI;
    session.requestRender();
    return session;
  }

  node(id: string): GraphNode {
    const node = this.graph?.nodes.find((n) => n.id === id);
    if (!node) throw new Error(`no node '${id}' in the cached graph`);
    return node;
  }

  selectNode(id: string | null): void {
    if (id !== null) this.node(id); // unknown ids are a programming error
    this.selected = id;
    this.listener.onSelect?.(id);
  }

  /** The pose a node would have after the pending buffer is applied. */
  effectivePose(id: string, frame = this.frame): Pose34 {
    const staged = [...this.pending].reverse().find((op) => op.node === id && op.frame === frame);
    if (staged) return staged.pose;
    const track = this.node(id).track;
    const pose = track[String(frame)];
    if (!pose) throw new Error(`node '${id}' has no pose at frame ${frame}`);
    return pose;
  }

  /** Stage a rotation/translation of the selected node; nothing is sent yet. */
  transform(intent: TransformIntent): void {
    if (this.selected === null) {
      this.toast("select a node before transforming");
      return;
    }
    let pose = this.effectivePose(this.selected);
    if (intent.rotate) {
      pose = rotateInPlace(pose, intent.rotate.axis, intent.rotate.degrees);
    }
    if (intent.translate) {
      pose = translate(pose, intent.translate);
    }
    const op: SetPoseOp = {
      op: "set_pose",
      node: this.selected,
      frame: this.frame,
      pose: squareUp(pose),
    };
    // one staged pose per node and frame; later intents replace it
    this.pending = this.pending.filter((p) => !(p.node === op.node && p.frame === op.frame));
    this.pending.push(op);
    this.listener.onPending?.([...this.pending]);
  }

  discard(): void {
    this.pending = [];
    this.listener.onPending?.([]);
  }

  /** Validate and send the pending buffer, then resync graph and render. */
  async commit(): Promise<void> {
    if (!this.pending.length) {
      this.toast("nothing staged to commit");
      return;
    }
    let script: EditScript;
    try {
      script = validateEditScript({ ops: this.pending });
    } catch (e) {
      // retrying an invalid script would only reproduce the failure
      this.toast(`invalid edit: ${message(e)}`);
      return;
    }
    this.busy(true);
    try {
      await this.client.edit(script, this.revision);
      this.pending = [];
      this.listener.onPending?.([]);
      await this.refreshGraph();
      this.requestRender();
    } catch (e) {
      if (e instanceof ServiceError && e.status === 409) {
        // someone else moved the graph; resync so the next commit applies
        await this.refreshGraph();
        this.toast(`graph changed under you (now revision ${this.revision}); staged edits kept`, () =>
          void this.commit(),
        );
      } else {
        this.toast(`edit failed: ${message(e)}`, () => void this.commit());
      }
    } finally {
      this.busy(false);
    }
  }

  /** Remove a node immediately (no staging; removal is not a drag gesture). */
  async removeNode(id: string): Promise<void> {
    this.node(id);
    this.busy(true);
    try {
      await this.client.edit(validateEditScript({ ops: [{ op: "remove", node: id }] }), this.revision);
      if (this.selected === id) this.selectNode(null);
      await this.refreshGraph();
      this.requestRender();
    } catch (e) {
      this.toast(`remove failed: ${message(e)}`, () => void this.removeNode(id));
    } finally {
      this.busy(false);
    }
  }

  async undo(): Promise<void> {
    this.busy(true);
    try {
      await this.client.undo();
      await this.refreshGraph();
      this.requestRender();
    } catch (e) {
      this.toast(`undo failed: ${message(e)}`);
    } finally {
      this.busy(false);
    }
  }

  /** Move the camera and ask for a fresh view. */
  roam(delta: CameraDelta): void {
    this.cameraPose = squareUp(roam(this.cameraPose, delta));
    this.requestRender();
  }

  toggleLayers(): void {
    this.showLayers = !this.showLayers;
    this.requestRender();
  }

  setFrame(frame: number): void {
    this.frame = frame;
    const pose = this.graph?.camera_poses[String(frame)];
    if (pose) this.cameraPose = pose;
    this.requestRender();
  }

  async refreshGraph(): Promise<void> {
    const { doc, revision } = await this.client.graph();
    this.graph = doc;
    this.revision = revision;
    if (this.selected && !doc.nodes.some((n) => n.id === this.selected)) {
      this.selectNode(null);
    }
    this.listener.onGraph?.(doc, revision);
  }

  /**
   * Render with at most one request in flight.
   *
   * Intents arriving while busy only mark the state dirty; when the current
   * request settles, one follow-up is built from the latest camera state, so
   * stale intermediate frames are never fetched at all.
   */
  requestRender(): void {
    if (this.inflight) {
      this.dirty = true;
      return;
    }
    const req: RenderRequest = {
      pose: this.cameraPose,
      frame: this.frame,
      width: this.renderWidth,
      height: this.renderHeight,
      layers: this.showLayers,
    };
    this.inflight = true;
    void this.client
      .render(req)
      .then((result) => {
        this.lastRender = result;
        this.listener.onRender?.(result);
      })
      .catch((e) => {
        this.toast(`render failed: ${message(e)}`, () => this.requestRender());
      })
      .finally(() => {
        this.inflight = false;
        if (this.dirty) {
          this.dirty = false;
          this.requestRender();
        }
      });
  }

  /** Resolves once no render is running or queued; for tests and teardown. */
  async idle(): Promise<void> {
    while (this.inflight || this.dirty) {
      await new Promise((r) => setTimeout(r, 5));
    }
  }

  private toast(msg: string, retry?: () => void): void {
    this.listener.onToast?.(msg, retry);
  }

  private busy(b: boolean): void {
    this.listener.onBusy?.(b);
  }
}

function message(e: unknown): string {
  return e instanceof Error ? e.message : String(e);
}
