"""Alpha compositing and image rendering over progressive scene graphs.

Two equivalent paths: a per-ray path that mirrors the math one ray at a
time (the contract surface, also used by the render service), and a batched
path that assembles (rays x slots) grids so field evaluations and the
compositing recurrences run as a handful of large array ops. The batched
path is what training and full-image rendering call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, CoverageError
from .fields import EncodingConfig, background_eval, farfield_eval, object_eval
from .numerics import tensor as T
from .sampling import Ray, SampleSet, SamplingConfig, gather_samples, pixel_directions
from .scenegraph import LocalGraph, ProgressiveState, SceneGraph, covering_graphs, idw_weights


@dataclass
class RenderConfig:
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    depth_mode: str = "distance"  # "interval" reproduces the mean-gap form

    def __post_init__(self):
        if self.depth_mode not in ("distance", "interval"):
            raise ContractError(f"unknown depth mode {self.depth_mode!r}")


@dataclass(eq=False)
class RenderOutput:
    """Composited values for one ray plus the per-sample bookkeeping."""

    color: object  # (3,) tensor or ndarray after fusion
    depth: object  # scalar
    weights: object  # (S,) tensor, w_i = T_i * alpha_i
    t_end: object  # residual transmittance
    t: np.ndarray
    delta: np.ndarray
    tags: tuple
    node_weights: dict

    def check(self):
        total = float(np.asarray(_data(self.weights)).sum() + _data(self.t_end))
        if abs(total - 1.0) > 1e-6:
            raise ContractError(f"weights + residual transmittance sum to {total}, not 1")
        if np.any(_data(self.weights) < 0):
            raise ContractError("negative compositing weight")
        return self


def _data(x):
    return x.data if isinstance(x, T.Tensor) else np.asarray(x)


def resolve_codes(graph: SceneGraph, node):
    """A node's own latent codes, or codes borrowed from a same-decoder node."""
    if node.codes is not None:
        return node.codes
    for other in graph.nodes.values():
        if other.decoder_key == node.decoder_key and other.codes is not None:
            return other.codes
    raise ContractError(f"node '{node.node_id}' has no latent codes and none to borrow")


# ---------------------------------------------------------------------------
# per-ray path


def composite(t, delta, sigma, color, far_color, depth_mode="distance"):
    """Alpha-composite one ray's samples with a far-field tail.

    alpha_i = 1 - exp(-sigma_i delta_i), T_i = exp(-sum_{k<i} sigma_k delta_k),
    C = sum T_i alpha_i c_i + T_end * far, D = sum T_i alpha_i t_i (or delta_i
    in "interval" mode). sigma and color may be tensors; t and delta are data.
    """
    t = np.asarray(_data(t), dtype=np.float64)
    delta = np.asarray(_data(delta), dtype=np.float64)
    if np.any(delta <= 0):
        raise ContractError("compositing needs positive sample intervals")
    if np.any(_data(sigma) < 0):
        raise ContractError("compositing needs non-negative densities")
    sigma = T.astensor(sigma)
    color = T.astensor(color)
    far_color = T.astensor(far_color).reshape((3,))
    s = len(t)

    q = sigma * delta
    lower = np.tril(np.ones((s, s)), k=-1)  # partial[i] = sum_{k<i} q_k
    partial = T.matmul(q.reshape((1, s)), T.constant(lower.T)).reshape((s,))
    trans = T.exp(-partial)
    alpha = 1.0 - T.exp(-q)
    weights = trans * alpha
    t_end = T.exp(-q.sum())

    out_color = (weights.reshape((s, 1)) * color).sum(axis=0) + t_end * far_color
    depth_basis = t if depth_mode == "distance" else delta
    depth = (weights * depth_basis).sum()

    node_weights = {}
    return RenderOutput(
        color=out_color,
        depth=depth,
        weights=weights,
        t_end=t_end,
        t=t,
        delta=delta,
        tags=(),
        node_weights=node_weights,
    )


def evaluate_samples(ray: Ray, samples: SampleSet, local: LocalGraph, config: RenderConfig):
    """Route each sample to its owning field; returns (sigma (S,), color (S, 3)).

    Background points are expressed relative to the window (offset by its
    center, divided by its bound radius) so the frequency schedule acts on
    scene-scale coordinates.
    """
    graph = local.graph
    tags = np.array(samples.tags, dtype=object)
    s = len(samples.t)
    sigma_parts, color_parts, positions = [], [], []

    bkg_rows = np.flatnonzero(tags == "background")
    if len(bkg_rows):
        x = (ray.at(samples.t[bkg_rows]) - local.center) / local.radius
        d = np.tile(ray.direction, (len(bkg_rows), 1))
        sg, cg = background_eval(x, d, graph.background, config.encoding)
        sigma_parts.append(sg)
        color_parts.append(cg)
        positions.append(bkg_rows)

    for node_id in dict.fromkeys(tags[tags != "background"]):
        rows = np.flatnonzero(tags == node_id)
        node = graph.node(node_id)
        codes = resolve_codes(graph, node)
        sg, cg = object_eval(
            samples.object_coords[rows],
            samples.object_dirs[rows],
            codes,
            graph.decoders[node.decoder_key],
            config.encoding,
        )
        sigma_parts.append(sg)
        color_parts.append(cg)
        positions.append(rows)

    order = np.concatenate(positions)
    inv = np.empty(s, dtype=int)
    inv[order] = np.arange(s)
    sigma = T.gather(T.concat(sigma_parts, axis=0), inv)
    color = T.gather(T.concat(color_parts, axis=0), inv)
    return sigma, color


def render_ray(ray: Ray, local: LocalGraph, config: RenderConfig, rng=None):
    """Gather, evaluate, and composite one ray against one local graph."""
    samples = gather_samples(ray, local.graph, config.sampling, local.reference_pose, rng)
    sigma, color = evaluate_samples(ray, samples, local, config)
    far = farfield_eval(ray.direction[None], local.graph.farfield).reshape((3,))
    out = composite(samples.t, samples.delta, sigma, color, far, config.depth_mode)
    out.tags = samples.tags
    w = _data(out.weights)
    out.node_weights = {
        tag: float(w[np.array(samples.tags, dtype=object) == tag].sum())
        for tag in dict.fromkeys(samples.tags)
    }
    return out


def render_pixel(ray: Ray, state: ProgressiveState, config: RenderConfig, rng=None):
    """Render one ray, fusing the composited color/depth of covering graphs
    by inverse distance from the ray origin to the graph centers."""
    graphs = covering_graphs(state, frame=ray.frame, position=ray.origin)
    if not graphs:
        raise CoverageError(f"no local graph covers frame {ray.frame}")
    outs = [render_ray(ray, lg, config, rng) for lg in graphs]
    if len(outs) == 1:
        return outs[0]
    w = idw_weights([lg.center for lg in graphs], ray.origin, state.idw_power)
    fused = outs[int(np.argmax(w))]
    fused.color = sum(wi * _data(o.color) for wi, o in zip(w, outs))
    fused.depth = float(sum(wi * _data(o.depth) for wi, o in zip(w, outs)))
    return fused


# ---------------------------------------------------------------------------
# batched path


@dataclass(eq=False)
class BatchRender:
    """Composited values for a batch of rays on a fixed slot grid."""

    color: T.Tensor  # (B, 3)
    depth: T.Tensor  # (B,)
    weights: T.Tensor  # (B, S)
    t_end: T.Tensor  # (B,)
    t: np.ndarray  # (B, S), +inf on invalid slots
    delta: np.ndarray  # (B, S), 0 on invalid slots
    valid: np.ndarray  # (B, S) bool
    tags: np.ndarray  # (B, S) object array, "" on invalid slots
    sample_colors: np.ndarray  # (B, S, 3) data copy for decomposition


def _node_pose_stack(node):
    frames = sorted(node.pose_track)
    index = {f: i for i, f in enumerate(frames)}
    r_inv = np.stack([node.pose_track[f].rotation.T for f in frames])
    t_inv = np.stack([-(node.pose_track[f].rotation.T @ node.pose_track[f].translation) for f in frames])
    return index, r_inv, t_inv


def _slab_batch(o, d, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        t_a = (-half - o) / d
        t_b = (half - o) / d
    lo = np.minimum(t_a, t_b)
    hi = np.maximum(t_a, t_b)
    flat = d == 0
    inside = np.abs(o) < half
    lo = np.where(flat, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(flat, np.where(inside, np.inf, -np.inf), hi)
    t_enter = lo.max(axis=1)
    t_exit = hi.min(axis=1)
    hit = (t_enter < t_exit) & (t_exit > 0)
    return np.maximum(t_enter, 0.0), t_exit, hit


def render_rays_batch(origins, dirs, frames, local: LocalGraph, config: RenderConfig, rng=None):
    """Batched gather + evaluate + composite against one local graph.

    Slot layout per ray: n_planes background slots then n_box slots per
    object node; slots of missed or unposed nodes are invalid and carry zero
    density and zero interval, so they drop out of every sum.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    frames = np.asarray(frames)
    graph = local.graph
    sc = config.sampling
    b = len(origins)
    train = sc.train
    if train and rng is None:
        raise ContractError("train-mode sampling needs an rng")

    # background plane samples
    edges = np.linspace(sc.d_near, sc.d_far, sc.n_planes + 1)
    u = rng.uniform(size=(b, sc.n_planes)) if train else np.full((b, sc.n_planes), 0.5)
    depths = edges[:-1] + u * np.diff(edges)
    along = dirs @ local.reference_pose.rotation[:, 2]
    t_bkg = np.where(along[:, None] > 1e-6, depths / np.maximum(along, 1e-12)[:, None], depths)

    slot_t = [t_bkg]
    slot_valid = [np.ones((b, sc.n_planes), dtype=bool)]
    groups = []  # (kind, node_id, rows, payload) in slot-layout order

    half = 0.5 * sc.shadow_scale
    for node_id, node in graph.nodes.items():
        index, r_inv, t_inv = _node_pose_stack(node)
        pose_row = np.array([index.get(int(f), -1) for f in frames])
        posed = pose_row >= 0
        r = r_inv[pose_row]
        tt = t_inv[pose_row]
        o_obj = (np.einsum("bij,bj->bi", r, origins) + tt) * node.scale
        d_obj = np.einsum("bij,bj->bi", r, dirs) * node.scale
        t_enter, t_exit, hit = _slab_batch(o_obj, d_obj, half)
        hit &= posed
        if train:
            frac = (np.arange(sc.n_box) + rng.uniform(size=(b, sc.n_box))) / sc.n_box
        else:
            frac = np.broadcast_to(np.arange(sc.n_box) / (sc.n_box - 1), (b, sc.n_box))
        span = np.where(hit, t_exit - t_enter, 0.0)
        t_box = t_enter[:, None] + frac * span[:, None]
        slot_t.append(t_box)
        slot_valid.append(np.repeat(hit[:, None], sc.n_box, axis=1))
        rows = np.flatnonzero(hit)
        coords = o_obj[rows, None, :] + t_box[rows, :, None] * d_obj[rows, None, :]
        d_unit = d_obj[rows] / np.linalg.norm(d_obj[rows], axis=1, keepdims=True)
        groups.append((node_id, rows, coords, d_unit))

    t_all = np.concatenate(slot_t, axis=1)
    valid = np.concatenate(slot_valid, axis=1)
    s = t_all.shape[1]

    # field evaluation per group; concat order matches slot layout
    x_bkg = origins[:, None, :] + t_bkg[:, :, None] * dirs[:, None, :]
    x_bkg = (x_bkg - local.center) / local.radius
    d_bkg = np.repeat(dirs[:, None, :], sc.n_planes, axis=1)
    sigma_parts, color_parts = [], []
    sg, cg = background_eval(
        x_bkg.reshape(-1, 3), d_bkg.reshape(-1, 3), graph.background, config.encoding
    )
    sigma_parts.append(sg)
    color_parts.append(cg)
    offsets = {"background": 0}
    cursor = b * sc.n_planes
    for node_id, rows, coords, d_unit in groups:
        node = graph.node(node_id)
        if len(rows):
            sg, cg = object_eval(
                coords.reshape(-1, 3),
                np.repeat(d_unit, sc.n_box, axis=0),
                resolve_codes(graph, node),
                graph.decoders[node.decoder_key],
                config.encoding,
            )
            sigma_parts.append(sg)
            color_parts.append(cg)
        offsets[node_id] = cursor
        cursor += len(rows) * sc.n_box

    pad = cursor  # index of the appended all-zero source row
    sigma_parts.append(T.constant(np.zeros(1)))
    color_parts.append(T.constant(np.zeros((1, 3))))

    # source index per (ray, slot) in layout order, then the sort permutation
    src = np.full((b, s), pad, dtype=int)
    src[:, : sc.n_planes] = np.arange(b * sc.n_planes).reshape(b, sc.n_planes)
    col = sc.n_planes
    for node_id, rows, _, _ in groups:
        block = np.arange(len(rows) * sc.n_box).reshape(len(rows), sc.n_box)
        src[rows, col : col + sc.n_box] = offsets[node_id] + block
        col += sc.n_box

    tags = np.full((b, s), "", dtype=object)
    tags[:, : sc.n_planes] = "background"
    col = sc.n_planes
    for node_id, rows, _, _ in groups:
        tags[rows, col : col + sc.n_box] = node_id
        col += sc.n_box

    t_sortable = np.where(valid, t_all, np.inf)
    order = np.argsort(t_sortable, axis=1, kind="stable")
    t_sorted = np.take_along_axis(t_sortable, order, axis=1)
    valid = np.take_along_axis(valid, order, axis=1)
    tags = np.take_along_axis(tags, order, axis=1)
    src = np.take_along_axis(src, order, axis=1)

    # interval lengths: gaps between consecutive valid samples, last repeated
    n_valid = valid.sum(axis=1)
    t_filled = np.where(valid, t_sorted, 0.0)
    gaps = np.diff(t_filled, axis=1)
    delta = np.concatenate([gaps, gaps[:, -1:]], axis=1)
    rows = np.arange(b)
    delta[rows, n_valid - 1] = np.take_along_axis(delta, np.maximum(n_valid - 2, 0)[:, None], 1)[:, 0]
    delta = np.where(valid, np.maximum(delta, 0.0), 0.0)

    sigma = T.gather(T.concat(sigma_parts, axis=0), src.ravel()).reshape((b, s))
    color = T.gather(T.concat(color_parts, axis=0), src.ravel()).reshape((b, s, 3))

    # composite
    q = sigma * delta
    lower = np.tril(np.ones((s, s)), k=-1)
    partial = T.matmul(q, T.constant(lower.T))
    weights = T.exp(-partial) * (1.0 - T.exp(-q))
    t_end = T.exp(-q.sum(axis=1))
    far = farfield_eval(dirs, graph.farfield)
    out_color = (weights.reshape((b, s, 1)) * color).sum(axis=1) + t_end.reshape((b, 1)) * far
    basis = np.where(valid, t_sorted, 0.0) if config.depth_mode == "distance" else delta
    depth = (weights * basis).sum(axis=1)

    return BatchRender(
        color=out_color,
        depth=depth,
        weights=weights,
        t_end=t_end,
        t=t_sorted,
        delta=delta,
        valid=valid,
        tags=tags,
        sample_colors=color.data,
    )


# ---------------------------------------------------------------------------
# images


@dataclass(eq=False)
class RenderedImage:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters
    layers: dict  # "background" and node ids -> (H, W, 3) contribution images


def image_pixels(width, height):
    u, v = np.meshgrid(np.arange(width), np.arange(height))
    return np.stack([u.ravel(), v.ravel()], axis=1)


def render_image(pose, intrinsics, frame, state: ProgressiveState, config: RenderConfig,
                 width, height, exclude_nodes=(), with_layers=True):
    """Full-image render with per-node decomposition layers.

    Layer images are weight-color contributions (far field folds into the
    background layer), so the layers sum to the full render exactly.
    """
    graphs = covering_graphs(state, frame=frame, position=pose.translation)
    if not graphs:
        raise CoverageError(f"no local graph covers frame {frame}")
    pixels = image_pixels(width, height)
    dirs = pixel_directions(intrinsics, pose, pixels)
    origins = np.tile(pose.translation, (len(pixels), 1))
    frames = np.full(len(pixels), frame)

    fuse_w = idw_weights([lg.center for lg in graphs], pose.translation, state.idw_power)
    color = np.zeros((len(pixels), 3))
    depth = np.zeros(len(pixels))
    layer_sums = {}

    with T.no_grad():
        for wf, lg in zip(fuse_w, graphs):
            if wf == 0.0:
                continue
            graph = lg.graph
            removed = {}
            for node_id in exclude_nodes:
                if node_id in graph.nodes:
                    removed[node_id] = graph.nodes.pop(node_id)
            try:
                out = render_rays_batch(origins, dirs, frames, lg, config)
            finally:
                graph.nodes.update(removed)
            color += wf * out.color.data
            depth += wf * out.depth.data
            if with_layers:
                w = out.weights.data[:, :, None]
                contrib = w * out.sample_colors
                far = out.t_end.data[:, None] * farfield_eval(dirs, graph.farfield).data
                bkg = np.where((out.tags == "background")[:, :, None], contrib, 0.0).sum(1) + far
                layer_sums["background"] = layer_sums.get("background", 0.0) + wf * bkg
                for node_id in graph.nodes:
                    sel = (out.tags == node_id)[:, :, None]
                    layer = np.where(sel, contrib, 0.0).sum(axis=1)
                    layer_sums[node_id] = layer_sums.get(node_id, 0.0) + wf * layer

    shape = (height, width)
    layers = {k: v.reshape(height, width, 3) for k, v in layer_sums.items()}
    return RenderedImage(color=color.reshape(*shape, 3), depth=depth.reshape(shape), layers=layers)
