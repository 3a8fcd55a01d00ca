"""Losses, lidar projection, and the progressive optimization loop.

The loop walks the camera trajectory in temporal order (a frame cursor
advances every few iterations) while each step draws a random pixel-ray
batch from the frames currently assigned to the active window. Window
spawning, freezing, and frame bookkeeping are delegated to the scene graph
module; this file owns the objective and the optimizer wiring.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataio import instance_box, psnr, split
from .errors import ContractError, InputError, NumericError
from .fields import (
    EncodingConfig,
    LatentCodes,
    crop_and_mask,
    encode_object,
    init_background,
    init_farfield,
    init_object_field,
)
from .numerics import tensor as T
from .numerics.checkpoint import load as load_container
from .numerics.checkpoint import save as save_container
from .numerics.optim import Adam
from .rendering import RenderConfig, render_image, render_rays_batch
from .sampling import SamplingConfig, pixel_directions
from .scenegraph import (
    LocalGraph,
    Pose,
    ProgressiveState,
    SceneGraph,
    SpawnEvent,
    advance_window,
    default_graph_factory,
    graph_structure_from_json,
    graph_to_json,
    pose_to_rows,
)


@dataclass
class LossWeights:
    """Multipliers for the four objective terms."""

    color: float = 1.0
    depth: float = 0.005
    distribution: float = 0.005
    sky: float = 0.001

    def __post_init__(self):
        for name in ("color", "depth", "distribution", "sky"):
            if getattr(self, name) < 0:
                raise ContractError(f"loss weight '{name}' must be non-negative")


@dataclass
class TrainConfig:
    iterations: int = 20000
    batch_rays: int = 1024
    mask_horizon: int | None = None  # None -> 30% of the iteration budget
    depth_sigma2: float = 0.05
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 5000
    learning_rate: float = 5e-4
    warmup: int = 0
    split: str = "full"
    bound_radius: float = 30.0
    overlap: int = 10
    printed_distribution_form: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ContractError("iterations must be >= 1")
        if self.batch_rays < 1:
            raise ContractError("batch_rays must be >= 1")
        if self.depth_sigma2 <= 0:
            raise ContractError("depth_sigma2 must be positive")
        if self.mask_horizon is not None and self.mask_horizon < 1:
            raise ContractError("mask_horizon must be >= 1")

    @property
    def horizon(self):
        if self.mask_horizon is not None:
            return self.mask_horizon
        return max(1, round(0.3 * self.iterations))


# ---------------------------------------------------------------------------
# lidar projection


def project_lidar(points, pose: Pose, intrinsics, width, height):
    """Planar depths of world points on the pixel grid.

    Points behind the camera or outside the image are dropped; when several
    points land on one pixel the nearest depth wins. Returns {(u, v): z}.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = {}
    if len(pts) == 0:
        return out
    k = np.asarray(intrinsics, dtype=np.float64)
    cam = (pts - pose.translation) @ pose.rotation  # world -> camera frame
    z = cam[:, 2]
    front = z > 0
    cam, z = cam[front], z[front]
    proj = cam @ k.T
    u = np.rint(proj[:, 0] / z).astype(int)
    v = np.rint(proj[:, 1] / z).astype(int)
    inside = (u >= 0) & (u < width) & (v >= 0) & (v < height)
    u, v, z = u[inside], v[inside], z[inside]
    for i in np.argsort(-z, kind="stable"):  # nearest written last
        out[(int(u[i]), int(v[i]))] = float(z[i])
    return out


def lidar_depth_image(frame, width, height):
    """Dense per-pixel along-ray lidar distances; NaN where nothing lands."""
    img = np.full((height, width), np.nan)
    if frame.lidar_points is None or len(frame.lidar_points) == 0:
        return img
    pix = project_lidar(frame.lidar_points, frame.pose, frame.intrinsics, width, height)
    if pix:
        k_inv = np.linalg.inv(np.asarray(frame.intrinsics, dtype=np.float64))
        uv1 = np.array([[u, v, 1.0] for (u, v) in pix])
        z = np.fromiter(pix.values(), dtype=np.float64)
        # planar z-depth to distance along the unit pixel ray
        img[uv1[:, 1].astype(int), uv1[:, 0].astype(int)] = z * np.linalg.norm(uv1 @ k_inv.T, axis=1)
    return img


# ---------------------------------------------------------------------------
# losses


def color_loss(pred, target):
    """Mean squared error over every channel of the batch."""
    diff = T.astensor(pred) - T.constant(np.asarray(target, dtype=np.float64))
    return (diff * diff).mean()


def depth_loss(pred, target, valid):
    """Mean squared depth error over lidar-valid rays; zero when none are."""
    valid = np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        return T.constant(np.float64(0.0))
    target = np.where(valid, np.asarray(target, dtype=np.float64), 0.0)
    diff = (T.astensor(pred) - T.constant(target)) * T.constant(valid.astype(np.float64))
    return (diff * diff).sum() / n


def ray_distribution_loss(weights, t, delta, depth, sigma2=0.05, printed_form=False):
    """Concentration of one ray's sample weights around a lidar depth.

    Sum of log(w_i + 1e-8) * exp(-(t_i - depth)^2 / (2 sigma2)) * delta_i,
    negated by default so that gradient descent pulls rendering weight
    toward the depth; printed_form keeps the published sign.
    """
    if sigma2 <= 0:
        raise ContractError("sigma2 must be positive")
    t = np.asarray(t, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    gauss = np.exp(-((t - depth) ** 2) / (2.0 * sigma2))
    term = T.log(T.astensor(weights) + 1e-8) * T.constant(gauss * delta)
    loss = term.sum()
    return loss if printed_form else -loss


def _distribution_batch(weights, t, delta, depth, valid, sigma2, printed_form=False):
    """Batched ray_distribution_loss, averaged over the lidar-valid rows."""
    valid = np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        return T.constant(np.float64(0.0))
    center = np.where(valid, np.asarray(depth, dtype=np.float64), 0.0)[:, None]
    gauss = np.exp(-((t - center) ** 2) / (2.0 * sigma2))
    gate = gauss * delta * valid[:, None]
    per_ray = (T.log(T.astensor(weights) + 1e-8) * T.constant(gate)).sum()
    loss = per_ray / n
    return loss if printed_form else -loss


def sky_loss(weights, delta, sky):
    """Mean over sky rays of the squared-weight integral sum((T a)^2 delta)."""
    sky = np.asarray(sky, dtype=bool)
    n = int(sky.sum())
    if n == 0:
        return T.constant(np.float64(0.0))
    w = T.astensor(weights)
    per_ray = (w * w * T.constant(np.asarray(delta, dtype=np.float64))).sum(axis=1)
    return (per_ray * T.constant(sky.astype(np.float64))).sum() / n


# ---------------------------------------------------------------------------
# batches


@dataclass(eq=False)
class RayBatch:
    origins: np.ndarray  # (B, 3)
    dirs: np.ndarray  # (B, 3) unit
    frames: np.ndarray  # (B,) int
    colors: np.ndarray  # (B, 3) targets in [0, 1]
    sky: np.ndarray  # (B,) bool
    lidar_t: np.ndarray  # (B,) along-ray distance, NaN where absent
    lidar_valid: np.ndarray  # (B,) bool


def sample_ray_batch(frames, depth_maps, n, rng):
    """Random pixel rays drawn uniformly over the given dataset frames.

    depth_maps holds per-frame dense along-ray lidar images (NaN = no
    return); targets and sky flags come straight off the frame arrays.
    """
    if not frames:
        raise ContractError("ray batch needs at least one frame")
    h, w = frames[0].image.shape[:2]
    pick = rng.integers(0, len(frames), size=n)
    us = rng.integers(0, w, size=n)
    vs = rng.integers(0, h, size=n)

    origins = np.empty((n, 3))
    dirs = np.empty((n, 3))
    colors = np.empty((n, 3))
    sky = np.zeros(n, dtype=bool)
    lidar_t = np.full(n, np.nan)
    indices = np.empty(n, dtype=int)
    for j, frame in enumerate(frames):
        sel = pick == j
        if not sel.any():
            continue
        u, v = us[sel], vs[sel]
        dirs[sel] = pixel_directions(frame.intrinsics, frame.pose, np.stack([u, v], axis=1))
        origins[sel] = frame.pose.translation
        colors[sel] = frame.image[v, u]
        indices[sel] = frame.index
        if frame.sky_mask is not None:
            sky[sel] = frame.sky_mask[v, u]
        dm = depth_maps.get(frame.index)
        if dm is not None:
            lidar_t[sel] = dm[v, u]
    return RayBatch(
        origins=origins,
        dirs=dirs,
        frames=indices,
        colors=colors,
        sky=sky,
        lidar_t=lidar_t,
        lidar_valid=np.isfinite(lidar_t),
    )


# ---------------------------------------------------------------------------
# setup


def trainable_parameters(state: ProgressiveState):
    """Parameters the optimizer may touch: the active window's background
    plus the shared decoders, latent codes, and far field."""
    graph = state.active.graph
    out = graph.owned_parameters()
    out.update(graph.shared_parameters())
    return out


def assign_codes(graph: SceneGraph, dataset, frame_indices):
    """Latent codes for each node from its instance crops.

    Encoder outputs are averaged over the training views where the instance
    mask is nonempty, then stored as free parameters; nodes with no visible
    view keep codes = None. Track order defines the instance mask values.
    """
    by_index = {f.index: f for f in dataset.frames}
    with T.no_grad():
        for row, track in enumerate(dataset.tracks):
            node = graph.nodes.get(track.track_id)
            if node is None or node.codes is not None:
                continue
            decoder = graph.decoders[node.decoder_key]
            total_s, total_a, count = 0.0, 0.0, 0
            for fi in frame_indices:
                frame = by_index.get(fi)
                if frame is None or frame.instance_mask is None:
                    continue
                box = instance_box(frame.instance_mask, row + 1)
                if box is None:
                    continue
                patch = crop_and_mask(frame.image, frame.instance_mask == row + 1, box)
                codes = encode_object(patch, decoder)
                total_s = total_s + codes.l_s.data
                total_a = total_a + codes.l_a.data
                count += 1
            if count:
                node.codes = LatentCodes(
                    l_s=T.parameter(total_s / count, name=f"codes/{node.node_id}/l_s"),
                    l_a=T.parameter(total_a / count, name=f"codes/{node.node_id}/l_a"),
                )


# ---------------------------------------------------------------------------
# steps and the loop


def train_step(state, batch, weights, config, render_config, optimizer, iteration, rng):
    """One optimization step on the active window; returns the metrics record.

    Loss terms with a zero weight are never evaluated, so their inputs
    cannot influence parameters. A non-finite total (or gradient) aborts the
    step: a diagnostic is emitted and parameters stay untouched.
    """
    render_config.encoding.t = int(iteration)
    out = render_rays_batch(batch.origins, batch.dirs, batch.frames, state.active, render_config, rng=rng)

    zero = T.constant(np.float64(0.0))
    l_c = color_loss(out.color, batch.colors) if weights.color != 0 else zero
    l_d = depth_loss(out.depth, batch.lidar_t, batch.lidar_valid) if weights.depth != 0 else zero
    l_sigma = (
        _distribution_batch(
            out.weights, out.t, out.delta, batch.lidar_t, batch.lidar_valid,
            config.depth_sigma2, config.printed_distribution_form,
        )
        if weights.distribution != 0
        else zero
    )
    l_seg = sky_loss(out.weights, out.delta, batch.sky) if weights.sky != 0 else zero

    total = None
    for lam, term in ((weights.color, l_c), (weights.depth, l_d),
                      (weights.distribution, l_sigma), (weights.sky, l_seg)):
        if lam == 0:
            continue
        piece = term * lam
        total = piece if total is None else total + piece

    record = {
        "iter": int(iteration),
        "L_c": float(l_c.data),
        "L_d": float(l_d.data),
        "L_sigma": float(l_sigma.data),
        "L_seg": float(l_seg.data),
        "total": 0.0 if total is None else float(total.data),
        "active_graph": len(state.graphs) - 1,
        "frozen_count": sum(1 for lg in state.graphs if lg.frozen),
    }
    if total is None:
        return record
    if not np.isfinite(total.data):
        warnings.warn(f"non-finite loss at iteration {iteration}; step aborted", RuntimeWarning)
        record["aborted"] = True
        return record

    optimizer.zero_grad()
    total.backward()
    if config.warmup > 0:
        optimizer.lr = config.learning_rate * min(1.0, (iteration + 1) / config.warmup)
    try:
        optimizer.step()
    except NumericError as err:
        warnings.warn(f"iteration {iteration}: {err}; step aborted", RuntimeWarning)
        record["aborted"] = True
    return record


def train(dataset, config: TrainConfig, out_dir, weights=None, render_config=None, field_sizes=None):
    """Progressive optimization over a dataset.

    Writes metrics.ndjson and periodic ckpt_{iter:08}.prosg files under
    out_dir; returns (state, records). The frame cursor walks the training
    frames once over the iteration budget, handing each pose to the window
    allocator; batches then draw from the active window's frame set.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = weights or LossWeights()
    rng = np.random.default_rng(config.seed)

    train_idx, test_idx = split(dataset, config.split)
    by_index = {f.index: f for f in dataset.frames}
    train_frames = [by_index[i] for i in train_idx]
    width, height = dataset.width, dataset.height

    if render_config is None:
        render_config = RenderConfig(sampling=SamplingConfig(), encoding=EncodingConfig())
    encoding = render_config.encoding
    encoding.t_final = config.horizon
    train_rc = RenderConfig(
        sampling=replace(render_config.sampling, train=True),
        encoding=encoding,
        depth_mode=render_config.depth_mode,
    )
    eval_rc = RenderConfig(
        sampling=replace(render_config.sampling, train=False),
        encoding=encoding,
        depth_mode=render_config.depth_mode,
    )

    # the graph knows every frame's poses (held-out renders need them);
    # only the ray batches are restricted to the training frames
    factory = default_graph_factory(dataset.frames, dataset.tracks, config=encoding, rng=rng, field_sizes=field_sizes)
    state = ProgressiveState(graph_factory=factory, bound_radius=config.bound_radius, overlap=config.overlap)
    depth_maps = {f.index: lidar_depth_image(f, width, height) for f in train_frames}

    advance_window(state, train_frames[0].pose, train_frames[0].index)
    assign_codes(state.active.graph, dataset, train_idx)
    optimizer = Adam(trainable_parameters(state), lr=config.learning_rate)

    chunk = max(1, config.iterations // len(train_frames))
    cursor = 0
    records = []
    eval_pool = test_idx or train_idx
    with open(out_dir / "metrics.ndjson", "w") as log:
        for k in range(config.iterations):
            step_cursor = min(k // chunk, len(train_frames) - 1)
            if step_cursor != cursor:
                cursor = step_cursor
                frame = train_frames[cursor]
                events = advance_window(state, frame.pose, frame.index)
                if any(isinstance(e, SpawnEvent) for e in events):
                    optimizer = Adam(trainable_parameters(state), lr=config.learning_rate)

            active_frames = [by_index[i] for i in state.active.frames if i in by_index]
            batch = sample_ray_batch(active_frames, depth_maps, config.batch_rays, rng)
            record = train_step(state, batch, weights, config, train_rc, optimizer, k, rng)

            if config.eval_every and (k + 1) % config.eval_every == 0:
                record["psnr"] = _eval_psnr(state, by_index, eval_pool, eval_rc, width, height)
            # keep the schema order stable for the log
            record = {key: record[key] for key in _RECORD_KEYS if key in record}
            records.append(record)
            log.write(json.dumps(record) + "\n")

            if config.checkpoint_every and (k + 1) % config.checkpoint_every == 0:
                save_state(state, out_dir / f"ckpt_{k + 1:08d}.prosg", train_rc, field_sizes)

    state.verify_frozen()
    save_state(state, out_dir / f"ckpt_{config.iterations:08d}.prosg", train_rc, field_sizes)
    return state, records


_RECORD_KEYS = ("iter", "L_c", "L_d", "L_sigma", "L_seg", "total", "psnr",
                "active_graph", "frozen_count", "aborted")


def _eval_psnr(state, by_index, candidates, eval_config, width, height):
    center = state.active.center
    pick = min(candidates, key=lambda i: float(np.linalg.norm(by_index[i].pose.translation - center)))
    frame = by_index[pick]
    img = render_image(frame.pose, frame.intrinsics, frame.index, state, eval_config,
                       width, height, with_layers=False)
    return float(psnr(img.color, frame.image))


# ---------------------------------------------------------------------------
# checkpoint container


def save_state(state: ProgressiveState, path, config: RenderConfig, field_sizes=None):
    """Serialize the progressive state plus its render configuration."""
    tensors = {}
    graphs_meta = []
    for i, lg in enumerate(state.graphs):
        for name, p in lg.graph.owned_parameters().items():
            tensors[f"graph{i}/{name}"] = p.data
        graphs_meta.append(
            {
                "structure": graph_to_json(lg.graph),
                "center": [float(v) for v in lg.center],
                "radius": float(lg.radius),
                "reference_pose": pose_to_rows(lg.reference_pose),
                "frames": [int(f) for f in lg.frames],
                "frozen": bool(lg.frozen),
                "checksum": lg.checksum,
            }
        )
    if state.graphs:
        for name, p in state.graphs[-1].graph.shared_parameters().items():
            tensors[name] = p.data

    enc = config.encoding
    samp = config.sampling
    meta = {
        "graphs": graphs_meta,
        "bound_radius": float(state.bound_radius),
        "overlap": int(state.overlap),
        "idw_power": float(state.idw_power),
        "encoding": {
            "l_position": enc.l_position,
            "l_direction": enc.l_direction,
            "include_raw": enc.include_raw,
            "t": enc.t,
            "t_final": enc.t_final,
        },
        "sampling": {
            "n_planes": samp.n_planes,
            "n_box": samp.n_box,
            "d_near": samp.d_near,
            "d_far": samp.d_far,
            "shadow_scale": samp.shadow_scale,
        },
        "depth_mode": config.depth_mode,
        "field_sizes": field_sizes or {},
    }
    save_container(path, "prosg.training", tensors, meta)


def load_state(path):
    """Rebuild (ProgressiveState, RenderConfig) from a checkpoint file."""
    module, tensors, meta = load_container(path)
    if module != "prosg.training":
        raise InputError(f"checkpoint belongs to module '{module}', not a training state")
    encoding = EncodingConfig(**meta["encoding"])
    sampling = SamplingConfig(**meta["sampling"])
    config = RenderConfig(sampling=sampling, encoding=encoding, depth_mode=meta.get("depth_mode", "distance"))
    sizes = meta.get("field_sizes") or {}
    rng = np.random.default_rng(0)  # skeleton init only; data is overwritten

    graphs_meta = meta["graphs"]
    if not graphs_meta:
        raise InputError("checkpoint holds no local graphs")

    # shared pieces come from the newest graph's structure
    _, _, node_list = graph_structure_from_json(graphs_meta[-1]["structure"])
    nodes = {n.node_id: n for n in node_list}
    decoders = {}
    for node in nodes.values():
        if node.decoder_key not in decoders:
            decoders[node.decoder_key] = init_object_field(rng, encoding, **sizes.get("object", {}))
        key_s, key_a = f"codes/{node.node_id}/l_s", f"codes/{node.node_id}/l_a"
        if key_s in tensors:
            node.codes = LatentCodes(
                l_s=T.parameter(tensors[key_s], name=key_s),
                l_a=T.parameter(tensors[key_a], name=key_a),
            )
    farfield = init_farfield(rng, **sizes.get("farfield", {}))

    locals_ = []
    for gm in graphs_meta:
        intrinsics, camera_poses, _ = graph_structure_from_json(gm["structure"])
        graph = SceneGraph(
            intrinsics=intrinsics,
            camera_poses=camera_poses,
            nodes=nodes,
            background=init_background(rng, encoding, **sizes.get("background", {})),
            farfield=farfield,
            decoders=decoders,
        )
        locals_.append(
            LocalGraph(
                graph=graph,
                center=np.asarray(gm["center"], dtype=np.float64),
                radius=float(gm["radius"]),
                reference_pose=Pose.from_matrix34(gm["reference_pose"]),
                frames=[int(f) for f in gm["frames"]],
                frozen=bool(gm["frozen"]),
                checksum=gm["checksum"],
            )
        )

    targets = {}
    for i, lg in enumerate(locals_):
        for name, p in lg.graph.owned_parameters().items():
            targets[f"graph{i}/{name}"] = p
    targets.update(locals_[-1].graph.shared_parameters())
    for name, data in tensors.items():
        if name not in targets:
            raise InputError(f"checkpoint tensor '{name}' does not match the rebuilt state")
        if targets[name].data.shape != data.shape:
            raise InputError(
                f"checkpoint tensor '{name}' has shape {data.shape}, "
                f"expected {targets[name].data.shape}"
            )
        targets[name].data = data

    last = locals_[-1].graph

    def factory(previous):
        base = previous if previous is not None else last
        return SceneGraph(
            intrinsics=base.intrinsics,
            camera_poses={},
            nodes=base.nodes,
            background=init_background(rng, encoding, **sizes.get("background", {})),
            farfield=base.farfield,
            decoders=base.decoders,
        )

    state = ProgressiveState(
        graph_factory=factory,
        bound_radius=float(meta["bound_radius"]),
        overlap=int(meta["overlap"]),
        idw_power=float(meta["idw_power"]),
        graphs=locals_,
    )
    return state, config
