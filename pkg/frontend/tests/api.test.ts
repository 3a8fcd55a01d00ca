import { afterEach, describe, expect, it, vi } from "vitest";

import { ServiceClient, ServiceError, splitLayers } from "../src/api.js";
import { multipart } from "./helpers.js";

const BOUNDARY = "prosg-layer";

describe("splitLayers", () => {
  it("recovers every part byte for byte", () => {
    // payloads cover the whole byte range, CRLF pairs included, so only
    // Content-Length can delimit them correctly
    const full = new Uint8Array(256).map((_, i) => i);
    const bg = new Uint8Array([13, 10, 13, 10, 45, 45, 0]);
    const parts = splitLayers(multipart([["full", full], ["background", bg]]));
    expect(parts.map((p) => p.name)).toEqual(["full", "background"]);
    expect(Array.from(parts[0].data)).toEqual(Array.from(full));
    expect(Array.from(parts[1].data)).toEqual(Array.from(bg));
  });

  it("rejects an empty or foreign body", () => {
    expect(() => splitLayers(new Uint8Array([1, 2, 3]))).toThrowError(/no parts/);
  });

  it("rejects a part with no Content-Length", () => {
    const enc = new TextEncoder();
    const broken = enc.encode(`--${BOUNDARY}\r\nContent-ID: full\r\n\r\nxxxx\r\n--${BOUNDARY}--\r\n`);
    expect(() => splitLayers(broken)).toThrowError(/malformed multipart/);
  });
});

describe("ServiceClient", () => {
  afterEach(() => {
    vi.unstubAllGlobals();
  });

  it("surfaces the service's error detail and status", async () => {
    vi.stubGlobal(
      "fetch",
      async () =>
        new Response(JSON.stringify({ detail: "stale revision 3; current is 5" }), {
          status: 409,
        }),
    );
    const client = new ServiceClient("http://svc");
    const err = await client.edit({ ops: [] }, 3).catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ServiceError);
    expect((err as ServiceError).status).toBe(409);
    expect((err as ServiceError).message).toBe("stale revision 3; current is 5");
  });

  it("falls back to the status text on a non-JSON error body", async () => {
    vi.stubGlobal(
      "fetch",
      async () => new Response("<html>teapot</html>", { status: 418, statusText: "teapot" }),
    );
    const client = new ServiceClient("http://svc");
    const err = await client.undo().catch((e: unknown) => e);
    expect((err as ServiceError).status).toBe(418);
    expect((err as ServiceError).message).toBe("teapot");
  });

  it("refuses a render response that lost its revision header", async () => {
    vi.stubGlobal("fetch", async () => new Response(new Uint8Array([1])));
    const client = new ServiceClient("http://svc");
    const err = await client
      .render({ pose: [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]], frame: 0, width: 8, height: 8 })
      .catch((e: unknown) => e);
    expect((err as ServiceError).message).toMatch(/missing revision header/);
  });

  it("strips trailing slashes from the base url", async () => {
    const seen: string[] = [];
    vi.stubGlobal("fetch", async (input: RequestInfo | URL) => {
      seen.push(String(input));
      return new Response(JSON.stringify({ status: "ok" }));
    });
    await new ServiceClient("http://svc:8000///").health();
    expect(seen).toEqual(["http://svc:8000/api/health"]);
  });
});
