"""Scene graph data model: nodes, transforms, progressive windows, edits.

A scene graph ties camera poses, one background field, one far field, and a
set of rigid object nodes together. Object nodes carry per-frame poses and
box sizes; their fields live in a registry shared by decoder key. The
progressive state manages a sequence of local graphs along the trajectory,
freezing each one when the camera leaves its bound.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, GraphLookupError, InputError
from .fields import (
    BackgroundField,
    EncodingConfig,
    FarField,
    LatentCodes,
    init_background,
    init_farfield,
    init_object_field,
)


# ---------------------------------------------------------------------------
# rigid transforms


@dataclass(eq=False)
class Pose:
    """Rigid transform: rotation (3x3, right-handed orthonormal) + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.rotation.shape != (3, 3):
            raise ContractError(f"rotation must be 3x3, got {self.rotation.shape}")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-6:
            raise ContractError(f"rotation is not orthonormal (max deviation {err:.3g})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > 1e-6:
            raise ContractError(f"rotation determinant is {det:.6f}, expected +1")

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, x):
        """Transform points (..., 3)."""
        return np.asarray(x) @ self.rotation.T + self.translation

    def apply_direction(self, d):
        return np.asarray(d) @ self.rotation.T

    def inverse(self):
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose"):
        """self after other: (self.compose(other)).apply(x) == self.apply(other.apply(x))."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def matrix34(self):
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    @classmethod
    def from_matrix34(cls, m):
        m = np.asarray(m, dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])


# ---------------------------------------------------------------------------
# nodes and graphs


@dataclass(eq=False)
class ObjectTrack:
    """Input annotation for one rigid object: box size and per-frame poses."""

    track_id: str
    class_tag: str
    size: np.ndarray  # (L, H, W) meters
    poses: dict  # frame index -> Pose (object to world)


@dataclass(eq=False)
class ObjectNode:
    """One rigid object in the graph; scaled so the box spans [-0.5, 0.5]^3."""

    node_id: str
    class_tag: str
    size: np.ndarray
    pose_track: dict
    decoder_key: str
    codes: LatentCodes | None = None

    def __post_init__(self):
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if np.any(self.size <= 0):
            raise ContractError(f"box size must be positive, got {self.size}")

    @property
    def scale(self):
        """Diagonal of S_o: reciprocal box size."""
        return 1.0 / self.size

    def frames(self):
        return sorted(self.pose_track)

    def pose_at(self, frame):
        if frame not in self.pose_track:
            raise GraphLookupError(f"node '{self.node_id}' has no pose at frame {frame}")
        return self.pose_track[frame]


def world_to_object(x, node: ObjectNode, frame):
    """World point into the node's scaled box frame; box interior maps to [-0.5, 0.5]^3."""
    inv = node.pose_at(frame).inverse()
    return inv.apply(x) * node.scale


def object_to_world(x_o, node: ObjectNode, frame):
    return node.pose_at(frame).apply(np.asarray(x_o) * node.size)


def world_to_object_direction(d, node: ObjectNode, frame, normalize=True):
    """Ray direction into box coordinates; unnormalized keeps world t-units valid."""
    d_o = node.pose_at(frame).inverse().apply_direction(d) * node.scale
    if normalize:
        d_o = d_o / np.linalg.norm(d_o, axis=-1, keepdims=True)
    return d_o


@dataclass(eq=False)
class SceneGraph:
    """Root + camera + background + far field + object nodes, with field registry."""

    intrinsics: np.ndarray
    camera_poses: dict  # frame index -> Pose (camera to world)
    nodes: dict  # node id -> ObjectNode, insertion ordered
    background: BackgroundField
    farfield: FarField
    decoders: dict  # decoder key -> ObjectField

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.validate()

    def validate(self):
        for node in self.nodes.values():
            if node.decoder_key not in self.decoders:
                raise ContractError(
                    f"node '{node.node_id}' references decoder key '{node.decoder_key}' "
                    f"not present in the registry {sorted(self.decoders)}"
                )

    def edges(self):
        """Tree edges from the world root; every leaf hangs off the root."""
        out = [("world", "camera"), ("world", "background"), ("world", "farfield")]
        out += [("world", node_id) for node_id in self.nodes]
        return out

    def node(self, node_id) -> ObjectNode:
        if node_id not in self.nodes:
            raise GraphLookupError(f"no node with id '{node_id}'")
        return self.nodes[node_id]

    def owned_parameters(self):
        """Parameters owned by this graph alone (frozen with it): the background."""
        return self.background.parameters()

    def shared_parameters(self):
        """Parameters carried across local graphs: decoders, codes, far field."""
        out = self.farfield.parameters()
        for key, dec in self.decoders.items():
            out.update(dec.parameters(f"decoder/{key}/"))
        for node_id, node in self.nodes.items():
            if node.codes is not None:
                out[f"codes/{node_id}/l_s"] = node.codes.l_s
                out[f"codes/{node_id}/l_a"] = node.codes.l_a
        return out


def build_scene_graph(frames, tracks, config: EncodingConfig | None = None, rng=None, field_sizes=None):
    """Assemble a graph from camera frames and object tracks.

    Frames need .index, .pose, .intrinsics; tracks are ObjectTrack records.
    Decoder keys are class tags, so same-class objects share decoder weights.
    """
    if not frames:
        raise InputError("at least one frame is required")
    config = config or EncodingConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    sizes = dict(field_sizes or {})
    frame_ids = {f.index for f in frames}
    camera_poses = {f.index: f.pose for f in frames}

    nodes = {}
    decoders = {}
    for track in tracks:
        if not track.poses:
            raise InputError(f"track '{track.track_id}' has no annotated frames")
        extra = set(track.poses) - frame_ids
        if extra:
            raise InputError(f"track '{track.track_id}' has poses at unknown frames {sorted(extra)}")
        key = track.class_tag
        if key not in decoders:
            decoders[key] = init_object_field(rng, config, **sizes.get("object", {}))
        nodes[track.track_id] = ObjectNode(
            node_id=track.track_id,
            class_tag=track.class_tag,
            size=track.size,
            pose_track=dict(track.poses),
            decoder_key=key,
        )

    return SceneGraph(
        intrinsics=frames[0].intrinsics,
        camera_poses=camera_poses,
        nodes=nodes,
        background=init_background(rng, config, **sizes.get("background", {})),
        farfield=init_farfield(rng, **sizes.get("farfield", {})),
        decoders=decoders,
    )


# ---------------------------------------------------------------------------
# edits


def set_node_pose(graph: SceneGraph, node_id, frame, pose: Pose):
    graph.node(node_id).pose_track[frame] = pose
    return graph


def insert_node(graph: SceneGraph, class_tag, box_size, pose_track, decoder_key, codes=None, node_id=None):
    """Add a node rendering through an existing shared decoder; returns its id."""
    if decoder_key not in graph.decoders:
        raise ContractError(f"decoder key '{decoder_key}' does not resolve; have {sorted(graph.decoders)}")
    if node_id is None:
        k = len(graph.nodes)
        while f"{class_tag}_{k}" in graph.nodes:
            k += 1
        node_id = f"{class_tag}_{k}"
    elif node_id in graph.nodes:
        raise ContractError(f"node id '{node_id}' already exists")
    graph.nodes[node_id] = ObjectNode(
        node_id=node_id,
        class_tag=class_tag,
        size=box_size,
        pose_track=dict(pose_track),
        decoder_key=decoder_key,
        codes=codes,
    )
    return node_id


def remove_node(graph: SceneGraph, node_id):
    if node_id not in graph.nodes:
        raise GraphLookupError(f"no node with id '{node_id}'")
    del graph.nodes[node_id]
    return graph


# ---------------------------------------------------------------------------
# progressive windows


def checksum_parameters(params: dict) -> str:
    """Order-independent digest of named parameter values."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


@dataclass(eq=False)
class LocalGraph:
    """One window of the trajectory with its own background field."""

    graph: SceneGraph
    center: np.ndarray
    radius: float
    reference_pose: Pose  # initial camera pose; orients background sample planes
    frames: list = field(default_factory=list)
    frozen: bool = False
    checksum: str | None = None

    def covers_point(self, x):
        return np.linalg.norm(np.asarray(x) - self.center) <= self.radius


@dataclass
class FreezeEvent:
    graph_index: int
    checksum: str


@dataclass
class SpawnEvent:
    graph_index: int
    shared_frames: list
    released_frames: list


@dataclass
class ProgressiveState:
    """Ordered local graphs; only the newest may train."""

    graph_factory: object  # previous SceneGraph | None -> SceneGraph
    bound_radius: float = 30.0
    overlap: int = 10
    idw_power: float = 1.0
    graphs: list = field(default_factory=list)

    @property
    def active(self) -> LocalGraph:
        if not self.graphs:
            raise GraphLookupError("progressive state has no graphs yet")
        return self.graphs[-1]

    def validate(self):
        unfrozen = [g for g in self.graphs if not g.frozen]
        if len(unfrozen) > 1:
            raise ContractError(f"{len(unfrozen)} unfrozen graphs; at most one allowed")

    def verify_frozen(self):
        """Recompute frozen checksums; raises if any frozen graph drifted."""
        for i, lg in enumerate(self.graphs):
            if lg.frozen:
                now = checksum_parameters(lg.graph.owned_parameters())
                if now != lg.checksum:
                    raise ContractError(f"frozen graph {i} parameters changed")


def advance_window(state: ProgressiveState, camera_pose: Pose, frame_index):
    """Assign a frame to the active window, spawning/freezing as the camera moves.

    Returns the list of allocation events (possibly empty). The first call
    spawns graph 0; later calls freeze the active graph and spawn a fresh one
    when the camera center exits the bound radius, re-assigning the last
    `overlap` frames to the new graph.
    """
    center = camera_pose.translation
    events = []
    if not state.graphs:
        state.graphs.append(
            LocalGraph(
                graph=state.graph_factory(None),
                center=center.copy(),
                radius=state.bound_radius,
                reference_pose=camera_pose,
                frames=[frame_index],
            )
        )
        events.append(SpawnEvent(0, [], []))
        state.validate()
        return events

    active = state.active
    if np.linalg.norm(center - active.center) > active.radius:
        active.frozen = True
        active.checksum = checksum_parameters(active.graph.owned_parameters())
        events.append(FreezeEvent(len(state.graphs) - 1, active.checksum))

        shared = list(active.frames[-state.overlap :]) if state.overlap > 0 else []
        released = [f for f in active.frames if f not in shared]
        new_graph = state.graph_factory(active.graph)
        for f in shared:
            if f in active.graph.camera_poses:
                new_graph.camera_poses[f] = active.graph.camera_poses[f]
        state.graphs.append(
            LocalGraph(
                graph=new_graph,
                center=center.copy(),
                radius=state.bound_radius,
                reference_pose=camera_pose,
                frames=list(shared),
            )
        )
        events.append(SpawnEvent(len(state.graphs) - 1, shared, released))

    lg = state.active
    if frame_index not in lg.frames:
        lg.frames.append(frame_index)
    lg.graph.camera_poses[frame_index] = camera_pose
    state.validate()
    return events


def default_graph_factory(frames, tracks, config=None, rng=None, field_sizes=None):
    """Factory that shares object decoders, codes, and the far field across
    windows while giving each new window a fresh background."""
    config = config or EncodingConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    sizes = dict(field_sizes or {})

    def factory(previous: SceneGraph | None) -> SceneGraph:
        if previous is None:
            return build_scene_graph(frames, tracks, config=config, rng=rng, field_sizes=sizes)
        return SceneGraph(
            intrinsics=previous.intrinsics,
            camera_poses={},
            nodes=previous.nodes,  # shared: objects persist across windows
            background=init_background(rng, config, **sizes.get("background", {})),
            farfield=previous.farfield,
            decoders=previous.decoders,
        )

    return factory


def covering_graphs(state: ProgressiveState, frame=None, position=None):
    """Local graphs responsible for a frame index or a roaming camera position.

    Frame lookup uses the assignment lists; position lookup uses the bound
    radii, falling back to the nearest center so any pose resolves.
    """
    if frame is not None:
        hits = [lg for lg in state.graphs if frame in lg.frames]
        if hits:
            return hits
    if position is not None:
        hits = [lg for lg in state.graphs if lg.covers_point(position)]
        if hits:
            return hits
        if state.graphs:
            dists = [np.linalg.norm(np.asarray(position) - lg.center) for lg in state.graphs]
            return [state.graphs[int(np.argmin(dists))]]
    return []


# ---------------------------------------------------------------------------
# fusion


def idw_fuse(values, query, power=1.0):
    """Inverse-distance-weighted blend of per-graph render values.

    values: list of (value, graph center). Weights are d^-power normalized;
    a query coinciding with a center (d < 1e-9) returns that value alone.
    """
    if not values:
        raise InputError("idw_fuse needs at least one value")
    if power <= 0:
        raise ContractError(f"IDW power must be positive, got {power}")
    query = np.asarray(query, dtype=np.float64)
    dists = np.array([np.linalg.norm(query - np.asarray(c, dtype=np.float64)) for _, c in values])
    for d, (v, _) in zip(dists, values):
        if d < 1e-9:
            return v
    inv = dists**-power
    weights = inv / inv.sum()
    out = None
    for w, (v, _) in zip(weights, values):
        term = w * np.asarray(v, dtype=np.float64)
        out = term if out is None else out + term
    return out


def idw_weights(centers, query, power=1.0):
    """Just the normalized weights, coincidence rule included."""
    query = np.asarray(query, dtype=np.float64)
    dists = np.array([np.linalg.norm(query - np.asarray(c, dtype=np.float64)) for c in centers])
    if np.any(dists < 1e-9):
        w = np.zeros(len(dists))
        w[int(np.argmin(dists))] = 1.0
        return w
    inv = dists**-power
    return inv / inv.sum()


# ---------------------------------------------------------------------------
# wire schema


def pose_to_rows(pose: Pose):
    return [[float(v) for v in row] for row in pose.matrix34()]


def graph_to_json(graph: SceneGraph, checkpoint=None):
    """Structural export; field parameters travel in checkpoints, not here."""
    return {
        "version": "prosg-graph/1",
        "intrinsics": [[float(v) for v in row] for row in graph.intrinsics],
        "camera_poses": {str(f): pose_to_rows(p) for f, p in sorted(graph.camera_poses.items())},
        "nodes": [
            {
                "id": n.node_id,
                "class": n.class_tag,
                "size": [float(v) for v in n.size],
                "decoder": n.decoder_key,
                "track": {str(f): pose_to_rows(p) for f, p in sorted(n.pose_track.items())},
            }
            for n in graph.nodes.values()
        ],
        "checkpoint": checkpoint,
    }


def graph_structure_from_json(doc):
    """Parse the wire schema back into plain structures (no field params).

    Returns (intrinsics, camera_poses, node list) for attachment to fields
    loaded from a checkpoint.
    """
    if doc.get("version") != "prosg-graph/1":
        raise InputError(f"unsupported graph schema version {doc.get('version')!r}")
    intrinsics = np.asarray(doc["intrinsics"], dtype=np.float64)
    camera_poses = {int(f): Pose.from_matrix34(m) for f, m in doc["camera_poses"].items()}
    nodes = [
        ObjectNode(
            node_id=nd["id"],
            class_tag=nd["class"],
            size=np.asarray(nd["size"]),
            pose_track={int(f): Pose.from_matrix34(m) for f, m in nd["track"].items()},
            decoder_key=nd["decoder"],
        )
        for nd in doc["nodes"]
    ]
    return intrinsics, camera_poses, nodes


def adopt_graph_structure(state: ProgressiveState, doc):
    """Apply an exported graph document to a loaded state.

    Node identity decides the merge: ids already in the state keep their
    latent codes and adopt the imported pose track and size, new ids come in
    bare (they borrow codes at render time), ids absent from the document are
    dropped. Camera poses and intrinsics stay with the checkpoint.
    """
    _, _, nodes = graph_structure_from_json(doc)
    graphs = [lg.graph for lg in state.graphs]
    if not graphs:
        raise GraphLookupError("progressive state has no graphs yet")
    existing = {}
    for g in graphs:
        existing.update(g.nodes)
    adopted = {}
    for imported in nodes:
        node = existing.get(imported.node_id)
        if node is None:
            node = imported
        else:
            node.pose_track = dict(imported.pose_track)
            node.size = np.asarray(imported.size, dtype=np.float64).reshape(3)
        if node.decoder_key not in graphs[-1].decoders:
            raise GraphLookupError(
                f"no decoder '{node.decoder_key}'; have {sorted(graphs[-1].decoders)}"
            )
        adopted[node.node_id] = node
    for g in graphs:
        g.nodes.clear()
        g.nodes.update(adopted)
    return state


# ---------------------------------------------------------------------------
# edit scripts

EDIT_OPS = ("set_pose", "insert", "remove")
_EDIT_FIELDS = {"op", "node", "frame", "pose", "box", "class"}


def _edit_frame(op, where):
    frame = op.get("frame")
    if not isinstance(frame, int) or isinstance(frame, bool):
        raise InputError(f"{where}: integer 'frame' required")
    return frame


def _edit_pose(op, where):
    if "pose" not in op:
        raise InputError(f"{where}: 3x4 'pose' required")
    try:
        return Pose.from_matrix34(op["pose"])
    except (ContractError, ValueError, TypeError) as e:
        raise InputError(f"{where}: {e}") from e


def parse_edit_script(doc):
    """Validate a wire-format edit script into ops with parsed poses.

    Schema: {"ops": [{"op": "set_pose"|"insert"|"remove", "node"?, "frame"?,
    "pose"?, "box"?, "class"?}]}. Poses are 3x4 rows, boxes (L, H, W) meters.
    Inserted nodes render through the decoder registered for their class tag.
    """
    if not isinstance(doc, dict) or not isinstance(doc.get("ops"), list):
        raise InputError("edit script must be an object with an 'ops' list")
    parsed = []
    for i, op in enumerate(doc["ops"]):
        where = f"ops[{i}]"
        if not isinstance(op, dict):
            raise InputError(f"{where} must be an object")
        extra = set(op) - _EDIT_FIELDS
        if extra:
            raise InputError(f"{where} has unknown fields {sorted(extra)}")
        kind = op.get("op")
        if kind not in EDIT_OPS:
            raise InputError(f"{where}: 'op' must be one of {sorted(EDIT_OPS)}, got {kind!r}")
        node = op.get("node")
        if kind in ("set_pose", "remove") and not isinstance(node, str):
            raise InputError(f"{where}: '{kind}' needs a string 'node' id")
        if kind == "set_pose":
            entry = {"op": kind, "node": node, "frame": _edit_frame(op, where),
                     "pose": _edit_pose(op, where)}
        elif kind == "remove":
            entry = {"op": kind, "node": node}
        else:
            cls = op.get("class")
            if not isinstance(cls, str):
                raise InputError(f"{where}: 'insert' needs a string 'class'")
            box = np.asarray(op.get("box", []), dtype=np.float64)
            if box.shape != (3,) or np.any(box <= 0):
                raise InputError(f"{where}: 'insert' needs a positive (L, H, W) 'box'")
            if node is not None and not isinstance(node, str):
                raise InputError(f"{where}: 'node' must be a string id")
            entry = {"op": kind, "class": cls, "box": box, "node": node,
                     "frame": _edit_frame(op, where), "pose": _edit_pose(op, where)}
        parsed.append(entry)
    return parsed


def apply_edit_script(state: ProgressiveState, ops):
    """Apply parsed edit ops to every window of the state, in order."""
    graphs = [lg.graph for lg in state.graphs]
    if not graphs:
        raise GraphLookupError("progressive state has no graphs yet")
    for op in ops:
        kind = op["op"]
        if kind in ("set_pose", "remove"):
            hit = [g for g in graphs if op["node"] in g.nodes]
            if not hit:
                raise GraphLookupError(f"no node with id '{op['node']}'")
            for g in hit:
                if kind == "set_pose":
                    set_node_pose(g, op["node"], op["frame"], op["pose"])
                else:
                    remove_node(g, op["node"])
        else:
            key = op["class"]
            if key not in graphs[-1].decoders:
                raise GraphLookupError(
                    f"no decoder '{key}'; have {sorted(graphs[-1].decoders)}"
                )
            if op["node"] is not None and any(op["node"] in g.nodes for g in graphs):
                raise ContractError(f"node id '{op['node']}' already exists")
            node_id = insert_node(
                graphs[-1], key, op["box"], {op["frame"]: op["pose"]}, key,
                node_id=op["node"],
            )
            node = graphs[-1].nodes[node_id]
            for g in graphs[:-1]:
                g.nodes[node_id] = node  # windows share node objects
    return state


def clone_structure(state: ProgressiveState) -> ProgressiveState:
    """Copy graph structure for editing; field parameters are shared, not copied.

    Node objects shared across windows stay shared in the clone, so a pose
    edit on one window is visible from every window, same as the original.
    """
    memo = {}

    def copy_node(n: ObjectNode):
        if n.node_id not in memo:
            memo[n.node_id] = ObjectNode(
                node_id=n.node_id,
                class_tag=n.class_tag,
                size=n.size,
                pose_track=dict(n.pose_track),
                decoder_key=n.decoder_key,
                codes=n.codes,
            )
        return memo[n.node_id]

    clone = ProgressiveState(
        graph_factory=state.graph_factory,
        bound_radius=state.bound_radius,
        overlap=state.overlap,
        idw_power=state.idw_power,
    )
    for lg in state.graphs:
        g = lg.graph
        clone.graphs.append(
            LocalGraph(
                graph=SceneGraph(
                    intrinsics=g.intrinsics,
                    camera_poses=dict(g.camera_poses),
                    nodes={nid: copy_node(n) for nid, n in g.nodes.items()},
                    background=g.background,
                    farfield=g.farfield,
                    decoders=g.decoders,
                ),
                center=lg.center,
                radius=lg.radius,
                reference_pose=lg.reference_pose,
                frames=list(lg.frames),
                frozen=lg.frozen,
                checksum=lg.checksum,
            )
        )
    return clone
