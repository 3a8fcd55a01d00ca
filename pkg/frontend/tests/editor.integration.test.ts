/**
 * End-to-end editor flow against a real service.
 *
 * beforeAll builds a tiny scene and checkpoint with the CLI, then serves it
 * on a free port; the tests walk the whole editor loop: load, select,
 * transform, commit, undo, roam, layers. Each test continues from the state
 * the previous one left, the same way a user session would.
 */

import { execFileSync, spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync, writeFileSync } from "node:fs";
import { createServer, type AddressInfo } from "node:net";
import { tmpdir } from "node:os";
import { join } from "node:path";
import type { Readable } from "node:stream";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ServiceError } from "../src/api.js";
import { SchemaError, validateEditScript } from "../src/schema.js";
import { EditorSession } from "../src/session.js";
import type { GraphDoc } from "../src/types.js";

const TRAIN_OVERRIDES = [
  "train.iterations=25",
  "train.batch_rays=32",
  "sampling.n_planes=8",
  "sampling.n_box=3",
  "sampling.d_far=40",
  "encoding.l_position=3",
  "encoding.l_direction=1",
  'fields.background={"hidden":16,"z_dim":4,"color_hidden":8}',
  'fields.object={"d_s":8,"d_a":8,"hidden":16,"hidden_dim":8,"blocks":1,"enc_channels":[3,8,8]}',
];

let root: string;
let child: ChildProcess | null = null;
let base: string;
const log = { text: "" };
let session: EditorSession;
const toasts: string[] = [];

function cli(args: string[]): void {
  try {
    execFileSync("prosg", args, { cwd: root, stdio: "pipe" });
  } catch (e) {
    const err = e as { stdout?: Buffer; stderr?: Buffer };
    throw new Error(
      `prosg ${args[0]} failed\n${err.stdout ?? ""}\n${err.stderr ?? ""}`,
    );
  }
}

function drainInto(stream: Readable | null, into: { text: string }): void {
  stream?.setEncoding("utf8");
  stream?.on("data", (chunk: string) => {
    into.text = (into.text + chunk).slice(-8192);
  });
}

async function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const srv = createServer();
    srv.on("error", reject);
    srv.listen(0, "127.0.0.1", () => {
      const port = (srv.address() as AddressInfo).port;
      srv.close(() => resolve(port));
    });
  });
}

async function sleep(ms: number): Promise<void> {
  await new Promise((r) => setTimeout(r, ms));
}

function sameBytes(a: Uint8Array, b: Uint8Array): boolean {
  return a.length === b.length && a.every((v, i) => v === b[i]);
}

beforeAll(async () => {
  root = mkdtempSync(join(tmpdir(), "prosg-editor-"));
  writeFileSync(
    join(root, "spec.json"),
    JSON.stringify({ width: 32, height: 24, n_frames: 4, n_objects: 2 }),
  );
  cli(["gen", "spec.json", "scene", "--seed", "5"]);
  cli(["train", "scene", "run", ...TRAIN_OVERRIDES.flatMap((kv) => ["--set", kv])]);

  const port = await freePort();
  base = `http://127.0.0.1:${port}`;
  child = spawn("prosg", ["serve", "run/ckpt_00000025.prosg", "--bind", `127.0.0.1:${port}`], {
    cwd: root,
    stdio: ["ignore", "pipe", "pipe"],
  });
  drainInto(child.stdout, log);
  drainInto(child.stderr, log);

  const deadline = Date.now() + 120_000;
  for (;;) {
    if (child.exitCode !== null) {
      throw new Error(`service exited early:\n${log.text}`);
    }
    try {
      const resp = await fetch(`${base}/api/health`);
      if (resp.ok && ((await resp.json()) as { status: string }).status === "ok") break;
    } catch {
      // not up yet
    }
    if (Date.now() > deadline) throw new Error(`service never became healthy:\n${log.text}`);
    await sleep(250);
  }
});

afterAll(async () => {
  if (child && child.exitCode === null) {
    const gone = new Promise<void>((resolve) => child?.once("exit", () => resolve()));
    child.kill("SIGTERM");
    await Promise.race([gone, sleep(5000).then(() => child?.kill("SIGKILL"))]);
  }
  rmSync(root, { recursive: true, force: true });
});

describe("editor against a live service", () => {
  let pristine: Uint8Array;
  let rotated: Uint8Array;

  it("loads the graph and lists every node", async () => {
    session = await EditorSession.load(base, { onToast: (m) => toasts.push(m) });
    session.renderWidth = 64;
    session.renderHeight = 48;
    await session.idle();

    const doc = (await (await fetch(`${base}/api/graph`)).json()) as GraphDoc;
    expect(session.graph?.nodes.length).toBe(doc.nodes.length);
    expect(doc.nodes.length).toBeGreaterThan(0);
    expect(session.revision).toBe(0);
    expect(session.lastRender?.revision).toBe(0);

    // settle on the size the rest of the suite compares at
    session.requestRender();
    await session.idle();
    pristine = session.lastRender!.image;
    expect(Array.from(pristine.slice(0, 4))).toEqual([137, 80, 78, 71]);
  });

  it("commits a rotation: new revision, different pixels", async () => {
    const id = session.graph!.nodes[0].id;
    session.selectNode(id);
    session.transform({ rotate: { axis: "z", degrees: 90 } });
    expect(session.pending).toHaveLength(1);
    await session.commit();
    await session.idle();

    expect(session.revision).toBe(1);
    expect(session.pending).toHaveLength(0);
    expect(session.lastRender?.revision).toBe(1);
    rotated = session.lastRender!.image;
    expect(sameBytes(rotated, pristine)).toBe(false);

    const listed = await session.client.revisions();
    expect(listed.current).toBe(1);
    expect(listed.revisions.at(-1)?.ops?.[0]).toMatchObject({ op: "set_pose", node: id });
  });

  it("undo returns to the exact previous pixels", async () => {
    await session.undo();
    await session.idle();
    expect(session.revision).toBe(0);
    expect(session.lastRender?.revision).toBe(0);
    expect(sameBytes(session.lastRender!.image, pristine)).toBe(true);
    expect(sameBytes(session.lastRender!.image, rotated)).toBe(false);
  });

  it("staged but discarded edits leave the render untouched", async () => {
    session.selectNode(session.graph!.nodes[0].id);
    session.transform({ translate: [0, 0, 1] });
    session.discard();
    expect(session.pending).toHaveLength(0);
    session.requestRender();
    await session.idle();
    expect(session.revision).toBe(0);
    expect(sameBytes(session.lastRender!.image, pristine)).toBe(true);
  });

  it("client and service reject the same malformed edit", async () => {
    const bad = { ops: [{ op: "set_pose", node: session.graph!.nodes[0].id }] };
    expect(() => validateEditScript(bad)).toThrowError(SchemaError);
    expect(() => validateEditScript(bad)).toThrowError(/integer 'frame' required/);

    const resp = await fetch(`${base}/api/edit`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(bad),
    });
    expect(resp.status).toBe(400);
    const body = (await resp.json()) as { detail: string };
    expect(body.detail).toMatch(/integer 'frame' required/);

    const gone = await session.client
      .edit(validateEditScript({ ops: [{ op: "remove", node: "no-such-node" }] }), session.revision)
      .catch((e: unknown) => e);
    expect(gone).toBeInstanceOf(ServiceError);
    expect((gone as ServiceError).status).toBe(404);
    expect((gone as ServiceError).message).toMatch(/no node with id/);

    const huge = await session.client
      .render({ pose: session.cameraPose, frame: 0, width: 4000, height: 8 })
      .catch((e: unknown) => e);
    expect((huge as ServiceError).status).toBe(422);
  });

  it("roams the camera without touching the revision", async () => {
    const seq = session.lastRender!.sequence!;
    session.roam({ move: [0, 0, 0.4], yaw: 10 });
    await session.idle();
    expect(session.revision).toBe(0);
    expect(session.lastRender?.revision).toBe(0);
    expect(session.lastRender!.sequence!).toBeGreaterThan(seq);
  });

  it("layer renders decompose into full, background, and one part per node", async () => {
    session.toggleLayers();
    await session.idle();
    const names = session.lastRender!.layers.map((l) => l.name);
    expect(names).toContain("full");
    expect(names).toContain("background");
    for (const node of session.graph!.nodes) {
      expect(names).toContain(node.id);
    }
    for (const layer of session.lastRender!.layers) {
      expect(Array.from(layer.data.slice(0, 4))).toEqual([137, 80, 78, 71]);
    }
  });
});
