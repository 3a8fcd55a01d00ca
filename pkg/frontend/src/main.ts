/**
 * Entry point: connect to the service named in the query string (or the
 * page's own origin) and mount the editor.
 */

import { EditorSession } from "./session.js";
import { mountEditor } from "./ui.js";
import type { EditorDom } from "./ui.js";

function need<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id} in the page shell`);
  return node as T;
}

async function boot(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const base = params.get("service") ?? window.location.origin;
  const dom: EditorDom = {
    map: need<HTMLCanvasElement>("map"),
    nodes: need("nodes"),
    render: need("render"),
    pending: need("pending"),
    toasts: need("toasts"),
    controls: need("controls"),
    status: need("status"),
  };
  const status = need("status");
  status.textContent = `connecting to ${base} ...`;
  try {
    const session = await EditorSession.load(base);
    mountEditor(dom, session);
  } catch (e) {
    status.textContent = `cannot reach ${base}: ${e instanceof Error ? e.message : e}`;
  }
}

void boot();
