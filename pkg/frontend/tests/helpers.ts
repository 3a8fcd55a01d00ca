/** Shared scaffolding for the frontend tests; no assertions live here. */

const BOUNDARY = "prosg-layer";

/** Build a multipart body the way the service does: CRLF heads, raw bytes. */
export function multipart(parts: Array<[string, Uint8Array]>): Uint8Array {
  const chunks: Uint8Array[] = [];
  const enc = new TextEncoder();
  for (const [name, data] of parts) {
    const head =
      `--${BOUNDARY}\r\nContent-Type: image/png\r\n` +
      `Content-ID: ${name}\r\nContent-Length: ${data.length}\r\n\r\n`;
    chunks.push(enc.encode(head), data, enc.encode("\r\n"));
  }
  chunks.push(enc.encode(`--${BOUNDARY}--\r\n`));
  const total = chunks.reduce((n, c) => n + c.length, 0);
  const out = new Uint8Array(total);
  let at = 0;
  for (const c of chunks) {
    out.set(c, at);
    at += c.length;
  }
  return out;
}

/** Poll until `cond` holds; async session plumbing has no other seam. */
export async function until(cond: () => boolean, what = "condition"): Promise<void> {
  const deadline = Date.now() + 5000;
  while (!cond()) {
    if (Date.now() > deadline) throw new Error(`timed out waiting for ${what}`);
    await new Promise((r) => setTimeout(r, 5));
  }
}
