/**
 * DOM panels: node list, transform controls, render pane, toasts.
 *
 * Pure wiring; every mutation goes through the session, and every paint
 * reads from it. PNG bytes become object URLs here and nowhere else.
 */

import type { EditorSession } from "./session.js";
import { SchematicMap } from "./map.js";
import type { MapScene } from "./map.js";
import { translationOf } from "./pose.js";
import type { EditOp, GraphDoc, LayerImage, RenderResult } from "./types.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export class Toasts {
  constructor(private host: HTMLElement) {}

  show(message: string, retry?: () => void): void {
    const toast = el("div", "toast", message);
    if (retry) {
      const btn = el("button", "toast-retry", "retry");
      btn.addEventListener("click", () => {
        toast.remove();
        retry();
      });
      toast.appendChild(btn);
    }
    this.host.appendChild(toast);
    setTimeout(() => toast.remove(), 8000);
  }
}

export class NodeList {
  constructor(
    private host: HTMLElement,
    private session: EditorSession,
  ) {}

  render(doc: GraphDoc): void {
    this.host.replaceChildren();
    for (const node of doc.nodes) {
      const row = el("div", "node-row" + (node.id === this.session.selected ? " selected" : ""));
      const label = el("span", "node-id", node.id);
      const cls = el("span", "node-class", node.class);
      row.append(label, cls);
      row.addEventListener("click", () => this.session.selectNode(node.id));
      const rm = el("button", "node-remove", "x");
      rm.title = `remove ${node.id}`;
      rm.addEventListener("click", (ev) => {
        ev.stopPropagation();
        void this.session.removeNode(node.id);
      });
      row.appendChild(rm);
      this.host.appendChild(row);
    }
  }
}

export class RenderPane {
  private img: HTMLImageElement;
  private badge: HTMLElement;
  private layerStrip: HTMLElement;
  private url: string | null = null;

  constructor(host: HTMLElement) {
    this.img = el("img", "render-img");
    this.badge = el("div", "revision-badge", "revision -");
    this.layerStrip = el("div", "layer-strip");
    host.append(this.img, this.badge, this.layerStrip);
  }

  /** Image and revision badge update in one place, atomically. */
  show(result: RenderResult): void {
    if (this.url) URL.revokeObjectURL(this.url);
    this.url = URL.createObjectURL(new Blob([result.image], { type: "image/png" }));
    this.img.src = this.url;
    this.badge.textContent = `revision ${result.revision}`;
    this.layerStrip.replaceChildren();
    for (const layer of result.layers) {
      this.layerStrip.appendChild(this.layerThumb(layer));
    }
  }

  private layerThumb(layer: LayerImage): HTMLElement {
    const wrap = el("figure", "layer-thumb");
    const img = el("img");
    img.src = URL.createObjectURL(new Blob([layer.data], { type: "image/png" }));
    const cap = el("figcaption", undefined, layer.name);
    wrap.append(img, cap);
    return wrap;
  }
}

export class PendingPanel {
  constructor(
    private host: HTMLElement,
    private session: EditorSession,
  ) {}

  render(ops: EditOp[]): void {
    this.host.replaceChildren();
    if (!ops.length) {
      this.host.appendChild(el("div", "pending-empty", "no staged edits"));
      return;
    }
    for (const op of ops) {
      const line =
        op.op === "set_pose"
          ? `set_pose ${op.node} @ frame ${op.frame}`
          : op.op === "remove"
            ? `remove ${op.node}`
            : `insert ${op.node} (${op.class})`;
      this.host.appendChild(el("div", "pending-op", line));
    }
    const commit = el("button", "btn-commit", "commit");
    commit.addEventListener("click", () => void this.session.commit());
    const discard = el("button", "btn-discard", "discard");
    discard.addEventListener("click", () => this.session.discard());
    this.host.append(commit, discard);
  }
}

export function buildMapScene(session: EditorSession): MapScene {
  const doc = session.graph;
  const boxes = (doc?.nodes ?? [])
    .filter((n) => n.track[String(session.frame)] || session.pending.some((p) => p.node === n.id))
    .map((n) => ({
      id: n.id,
      pose: session.effectivePose(n.id),
      size: n.size,
      selected: n.id === session.selected,
    }));
  return { boxes, camera: session.cameraPose };
}

export interface EditorDom {
  map: HTMLCanvasElement;
  nodes: HTMLElement;
  render: HTMLElement;
  pending: HTMLElement;
  toasts: HTMLElement;
  controls: HTMLElement;
  status: HTMLElement;
}

/** Wire every panel to a loaded session. Returns the redraw hook for tests. */
export function mountEditor(dom: EditorDom, session: EditorSession): () => void {
  const toasts = new Toasts(dom.toasts);
  const nodeList = new NodeList(dom.nodes, session);
  const pane = new RenderPane(dom.render);
  const pendingPanel = new PendingPanel(dom.pending, session);
  const map = new SchematicMap(dom.map, (id) => session.selectNode(id));

  const redraw = () => {
    if (session.graph) nodeList.render(session.graph);
    pendingPanel.render(session.pending);
    map.draw(buildMapScene(session));
    const cam = translationOf(session.cameraPose);
    dom.status.textContent =
      `frame ${session.frame} | camera (${cam.map((v) => v.toFixed(1)).join(", ")})` +
      ` | fov ${session.fovDegrees.toFixed(0)} deg`;
  };

  session.bind({
    onGraph: redraw,
    onSelect: redraw,
    onPending: redraw,
    onRender: (result) => {
      pane.show(result);
      redraw();
    },
    onToast: (m, retry) => toasts.show(m, retry),
    onBusy: (b) => dom.controls.classList.toggle("busy", b),
  });

  const button = (label: string, onClick: () => void, title = "") => {
    const b = el("button", "ctl", label);
    b.title = title;
    b.addEventListener("click", onClick);
    dom.controls.appendChild(b);
    return b;
  };

  const step = 0.5;
  button("←", () => session.roam({ move: [-step, 0, 0] }), "strafe left");
  button("→", () => session.roam({ move: [step, 0, 0] }), "strafe right");
  button("↑", () => session.roam({ move: [0, 0, step] }), "forward");
  button("↓", () => session.roam({ move: [0, 0, -step] }), "back");
  button("↺", () => session.roam({ yaw: 15 }), "yaw left");
  button("↻", () => session.roam({ yaw: -15 }), "yaw right");
  button("rot 15°", () => session.transform({ rotate: { axis: "z", degrees: 15 } }));
  button("x+0.5", () => session.transform({ translate: [0.5, 0, 0] }));
  button("x-0.5", () => session.transform({ translate: [-0.5, 0, 0] }));
  button("y+0.5", () => session.transform({ translate: [0, 0.5, 0] }));
  button("layers", () => session.toggleLayers());
  button("undo", () => void session.undo());

  redraw();
  return redraw;
}
