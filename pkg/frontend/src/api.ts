/**
 * Typed client for the render service HTTP API.
 *
 * Every response's revision header is surfaced so callers can keep the
 * shown-image-matches-shown-revision invariant without guessing.
 */

import type {
  EditScript,
  GraphDoc,
  HealthInfo,
  LayerImage,
  RenderRequest,
  RenderResult,
  RevisionEntry,
} from "./types.js";

export class ServiceError extends Error {
  constructor(
    public status: number,
    detail: string,
  ) {
    super(detail);
  }
}

const LAYER_BOUNDARY = "prosg-layer";

async function failFrom(resp: Response): Promise<never> {
  let detail = resp.statusText;
  try {
    const body = (await resp.json()) as { detail?: string };
    if (typeof body.detail === "string") detail = body.detail;
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ServiceError(resp.status, detail);
}

function revisionOf(resp: Response): number {
  const raw = resp.headers.get("X-Prosg-Revision");
  if (raw === null) throw new ServiceError(resp.status, "response missing revision header");
  return Number(raw);
}

/** Split a multipart layer response into named PNG parts. */
export function splitLayers(blob: Uint8Array): LayerImage[] {
  const text = new TextDecoder("latin1").decode(blob);
  const marker = `--${LAYER_BOUNDARY}`;
  const parts: LayerImage[] = [];
  let at = text.indexOf(marker);
  while (at >= 0) {
    const headStart = at + marker.length;
    if (text.startsWith("--", headStart)) break; // closing delimiter
    const headEnd = text.indexOf("\r\n\r\n", headStart);
    if (headEnd < 0) break;
    const head = text.slice(headStart, headEnd);
    const name = /Content-ID: ([^\r\n]+)/.exec(head)?.[1];
    const length = Number(/Content-Length: (\d+)/.exec(head)?.[1]);
    if (!name || !Number.isFinite(length)) {
      throw new ServiceError(502, "malformed multipart layer response");
    }
    const dataStart = headEnd + 4;
    parts.push({ name, data: blob.slice(dataStart, dataStart + length) });
    at = text.indexOf(marker, dataStart + length);
  }
  if (!parts.length) throw new ServiceError(502, "no parts in multipart layer response");
  return parts;
}

export class ServiceClient {
  constructor(public baseUrl: string) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  private async getJson<T>(path: string): Promise<T> {
    const resp = await fetch(this.baseUrl + path);
    if (!resp.ok) await failFrom(resp);
    return (await resp.json()) as T;
  }

  async health(): Promise<HealthInfo> {
    return this.getJson<HealthInfo>("/api/health");
  }

  async graph(): Promise<{ doc: GraphDoc; revision: number }> {
    const resp = await fetch(this.baseUrl + "/api/graph");
    if (!resp.ok) await failFrom(resp);
    const doc = (await resp.json()) as GraphDoc;
    return { doc, revision: revisionOf(resp) };
  }

  async revisions(): Promise<{ current: number; revisions: RevisionEntry[] }> {
    return this.getJson("/api/revisions");
  }

  /** Apply a validated script at `revision`; 409 means someone got there first. */
  async edit(script: EditScript, revision: number): Promise<number> {
    const resp = await fetch(this.baseUrl + "/api/edit", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ revision, ops: script.ops }),
    });
    if (!resp.ok) await failFrom(resp);
    const body = (await resp.json()) as { revision: number };
    return body.revision;
  }

  async undo(): Promise<number> {
    const resp = await fetch(this.baseUrl + "/api/undo", { method: "POST" });
    if (!resp.ok) await failFrom(resp);
    const body = (await resp.json()) as { revision: number };
    return body.revision;
  }

  async render(req: RenderRequest): Promise<RenderResult> {
    const resp = await fetch(this.baseUrl + "/api/render", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(req),
    });
    if (!resp.ok) await failFrom(resp);
    const revision = revisionOf(resp);
    const seqRaw = resp.headers.get("X-Prosg-Sequence");
    const sequence = seqRaw === null ? null : Number(seqRaw);
    const blob = new Uint8Array(await resp.arrayBuffer());
    if (req.layers) {
      const layers = splitLayers(blob);
      const full = layers.find((p) => p.name === "full");
      if (!full) throw new ServiceError(502, "layer response lacks the full image");
      return { revision, sequence, image: full.data, layers };
    }
    return { revision, sequence, image: blob, layers: [] };
  }
}
