"""HTTP render service: one checkpoint, one editable scene, atomic revisions.

Edits are serialized behind a lock and swap in a fresh structural snapshot;
renders use whatever snapshot is current when they start, so a half-applied
edit is never observable. Undo replays the edit history from the checkpoint,
which is the source of truth for revision 0.
"""

import asyncio
import hashlib
import io
import itertools
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from PIL import Image

from .errors import (
    ContractError,
    CoverageError,
    GraphLookupError,
    InputError,
    NumericError,
)
from .rendering import render_image
from .report import quantize_image, quantize_layers
from .scenegraph import (
    Pose,
    apply_edit_script,
    clone_structure,
    graph_to_json,
    parse_edit_script,
)
from .training import load_state

LAYER_BOUNDARY = "prosg-layer"  # fixed so identical requests give identical bytes


@dataclass(eq=False)
class Snapshot:
    """Immutable view of the scene at one revision."""

    revision: int
    state: object
    graph_json: bytes
    checksum: str


@dataclass(eq=False)
class SessionState:
    """One loaded checkpoint plus the edit history that produced `current`."""

    checkpoint: str | None = None  # content digest of the loaded file
    base: object | None = None  # pristine structures, never edited
    config: object | None = None
    history: list = field(default_factory=list)  # raw edit documents, in order
    current: Snapshot | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)
    sequence: object = field(default_factory=lambda: itertools.count(1))

    def snapshot(self, state, revision):
        doc = graph_to_json(state.graphs[-1].graph, checkpoint=self.checkpoint)
        blob = json.dumps(doc, indent=2, sort_keys=True).encode()
        return Snapshot(revision, state, blob, hashlib.sha256(blob).hexdigest())

    def load(self, path):
        state, config = load_state(path)
        self.checkpoint = hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
        self.base = state
        self.config = config
        self.history = []
        self.current = self.snapshot(clone_structure(state), 0)

    def replay(self):
        """History applied to the checkpoint; deterministic by construction."""
        state = clone_structure(self.base)
        for doc in self.history:
            apply_edit_script(state, parse_edit_script(doc))
        return state


def _fail(status, detail):
    return JSONResponse({"detail": detail}, status_code=status)


def _png_bytes(u8):
    buf = io.BytesIO()
    Image.fromarray(u8).save(buf, format="PNG")
    return buf.getvalue()


def _multipart(parts):
    """image/png parts named by Content-ID under a fixed boundary."""
    chunks = []
    for name, data in parts:
        head = (f"--{LAYER_BOUNDARY}\r\nContent-Type: image/png\r\n"
                f"Content-ID: {name}\r\nContent-Length: {len(data)}\r\n\r\n")
        chunks.append(head.encode() + data + b"\r\n")
    chunks.append(f"--{LAYER_BOUNDARY}--\r\n".encode())
    return b"".join(chunks)


def _snapshot_headers(snap, sequence=None):
    headers = {"X-Prosg-Revision": str(snap.revision),
               "X-Prosg-Graph-Checksum": snap.checksum}
    if sequence is not None:
        headers["X-Prosg-Sequence"] = str(sequence)
    return headers


async def _json_object(request):
    try:
        body = await request.json()
    except Exception as e:
        raise InputError(f"request body is not valid JSON: {e}") from e
    if not isinstance(body, dict):
        raise InputError("request body must be a JSON object")
    return body


def _int_field(body, name, minimum=None):
    value = body.get(name)
    if not isinstance(value, int) or isinstance(value, bool):
        raise InputError(f"'{name}' must be an integer")
    if minimum is not None and value < minimum:
        raise InputError(f"'{name}' must be >= {minimum}")
    return value


def create_app(checkpoint=None, max_width=320, max_height=240, timeout=120.0,
               cors_origins=("*",)):
    """Build the service app; pass a checkpoint path to load it immediately."""
    app = FastAPI(title="prosg render service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=list(cors_origins),
        allow_methods=["*"],
        allow_headers=["*"],
        expose_headers=["*"],
    )
    session = SessionState()
    app.state.session = session
    app.state.limits = (int(max_width), int(max_height))
    app.state.timeout = float(timeout)
    if checkpoint is not None:
        session.load(checkpoint)

    @app.get("/api/health")
    def health():
        snap = session.current
        if snap is None:
            return {"status": "no checkpoint"}
        return {"status": "ok", "revision": snap.revision, "checkpoint": session.checkpoint}

    @app.get("/api/graph")
    def graph():
        snap = session.current
        if snap is None:
            return _fail(503, "no checkpoint loaded")
        return Response(snap.graph_json, media_type="application/json",
                        headers=_snapshot_headers(snap))

    @app.get("/api/revisions")
    def revisions():
        snap = session.current
        if snap is None:
            return _fail(503, "no checkpoint loaded")
        items = [{"revision": 0, "ops": None}]
        items += [{"revision": i + 1, "ops": doc["ops"]}
                  for i, doc in enumerate(session.history)]
        return {"current": snap.revision, "revisions": items}

    @app.post("/api/edit")
    async def edit(request: Request):
        if session.current is None:
            return _fail(503, "no checkpoint loaded")
        try:
            body = await _json_object(request)
        except InputError as e:
            return _fail(400, str(e))
        extra = set(body) - {"ops", "revision"}
        if extra:
            return _fail(400, f"unknown fields {sorted(extra)}")
        with session.lock:
            snap = session.current
            expected = body.get("revision")
            if expected is not None and expected != snap.revision:
                return _fail(409, f"stale revision {expected}; current is {snap.revision}")
            doc = {"ops": body.get("ops")}
            try:
                ops = parse_edit_script(doc)
                state = clone_structure(snap.state)
                apply_edit_script(state, ops)
            except GraphLookupError as e:
                return _fail(404, str(e))
            except (InputError, ContractError) as e:
                return _fail(400, str(e))
            session.history.append(doc)
            new_snap = session.snapshot(state, len(session.history))
            session.current = new_snap
        return JSONResponse({"revision": new_snap.revision},
                            headers=_snapshot_headers(new_snap))

    @app.post("/api/undo")
    def undo():
        if session.current is None:
            return _fail(503, "no checkpoint loaded")
        with session.lock:
            if not session.history:
                return _fail(409, "no edits to undo")
            session.history.pop()
            snap = session.snapshot(session.replay(), len(session.history))
            session.current = snap
        return JSONResponse({"revision": snap.revision}, headers=_snapshot_headers(snap))

    @app.post("/api/render")
    async def render(request: Request):
        snap = session.current
        if snap is None:
            return _fail(503, "no checkpoint loaded")
        try:
            body = await _json_object(request)
            extra = set(body) - {"pose", "frame", "width", "height", "layers"}
            if extra:
                raise InputError(f"unknown fields {sorted(extra)}")
            width = _int_field(body, "width", minimum=1)
            height = _int_field(body, "height", minimum=1)
            frame = _int_field(body, "frame")
            layers = body.get("layers", False)
            if not isinstance(layers, bool):
                raise InputError("'layers' must be a boolean")
            if "pose" not in body:
                raise InputError("3x4 'pose' required")
            try:
                pose = Pose.from_matrix34(body["pose"])
            except (ContractError, ValueError, TypeError) as e:
                raise InputError(f"pose: {e}") from e
        except InputError as e:
            return _fail(400, str(e))
        max_w, max_h = app.state.limits
        if width > max_w or height > max_h:
            return _fail(422, f"{width}x{height} exceeds the {max_w}x{max_h} limit")

        sequence = next(session.sequence)

        def work():
            g = snap.state.graphs[-1].graph
            return render_image(pose, g.intrinsics, frame, snap.state, session.config,
                                width, height, with_layers=layers)

        try:
            image = await asyncio.wait_for(asyncio.to_thread(work), app.state.timeout)
        except asyncio.TimeoutError:
            return _fail(504, f"render exceeded {app.state.timeout}s")
        except NumericError as e:
            return _fail(500, f"numeric failure: {e}")
        except (CoverageError, GraphLookupError, ContractError, InputError) as e:
            return _fail(400, str(e))

        headers = _snapshot_headers(snap, sequence)
        if not layers:
            return Response(_png_bytes(quantize_image(image.color)),
                            media_type="image/png", headers=headers)
        parts = [("full", _png_bytes(quantize_image(image.color)))]
        parts += [(name, _png_bytes(quant))
                  for name, quant in quantize_layers(image.color, image.layers).items()]
        return Response(_multipart(parts),
                        media_type=f"multipart/mixed; boundary={LAYER_BOUNDARY}",
                        headers=headers)

    return app
