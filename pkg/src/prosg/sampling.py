"""Ray generation and sample placement along rays.

Background samples come from a stack of planes parallel to the local
window's initial image plane; object samples are stratified between ray-box
entrance and exit points found with the slab method.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .scenegraph import Pose, SceneGraph, world_to_object, world_to_object_direction


@dataclass(eq=False)
class Ray:
    """One camera ray in world coordinates."""

    origin: np.ndarray
    direction: np.ndarray
    frame: int
    pixel: tuple  # (u, v)
    sky: bool = False
    lidar_depth: float | None = None  # along-ray distance, meters

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-6:
            raise ContractError(f"ray direction must be unit length, |d| = {n:.8f}")

    def at(self, t):
        return self.origin + np.asarray(t)[..., None] * self.direction


@dataclass
class SamplingConfig:
    n_planes: int = 24
    n_box: int = 7
    d_near: float = 0.5
    d_far: float = 80.0
    shadow_scale: float = 1.2  # box enlargement so shadows under objects stay inside
    train: bool = False


@dataclass(eq=False)
class SampleSet:
    """Merged, ascending samples along one ray with per-sample owner tags."""

    t: np.ndarray
    delta: np.ndarray
    tags: tuple  # "background" or an object node id, per sample
    object_coords: np.ndarray  # (S, 3) box coordinates; zeros on background rows
    object_dirs: np.ndarray  # (S, 3) unit box-frame directions; zeros on background rows

    def check(self, n_planes=None, n_box=None):
        if np.any(np.diff(self.t) <= 0):
            raise ContractError("sample distances must be strictly ascending")
        if np.any(self.delta <= 0):
            raise ContractError("sample intervals must be positive")
        if n_planes is not None:
            n_obj = len(self.t) - n_planes
            if n_obj % n_box != 0 or n_obj < 0:
                raise ContractError(
                    f"{len(self.t)} samples do not decompose as {n_planes} + m*{n_box}"
                )
        return self


def pixel_directions(intrinsics, pose: Pose, pixels):
    """World-space unit directions through pixel centers (integer coordinates)."""
    k = np.asarray(intrinsics, dtype=np.float64)
    if abs(np.linalg.det(k)) < 1e-12:
        raise ContractError("camera intrinsics are singular")
    k_inv = np.linalg.inv(k)
    uv1 = np.concatenate([np.asarray(pixels, dtype=np.float64), np.ones((len(pixels), 1))], axis=1)
    cam = uv1 @ k_inv.T
    world = cam @ pose.rotation.T
    return world / np.linalg.norm(world, axis=1, keepdims=True)


def generate_rays(frame, pixels):
    """Rays through the given (u, v) pixels of a frame.

    The frame provides .pose, .intrinsics, .index, and optionally .sky_mask
    (bool H x W) and .lidar_map ({(u, v): planar depth}); planar depths are
    converted to along-ray distances.
    """
    pixels = [(int(u), int(v)) for u, v in pixels]
    dirs = pixel_directions(frame.intrinsics, frame.pose, pixels)
    k_inv = np.linalg.inv(np.asarray(frame.intrinsics, dtype=np.float64))
    sky_mask = getattr(frame, "sky_mask", None)
    lidar_map = getattr(frame, "lidar_map", None) or {}
    origin = frame.pose.translation
    rays = []
    for (u, v), d in zip(pixels, dirs):
        depth = lidar_map.get((u, v))
        if depth is not None:
            # planar z-depth to distance along the (normalized) ray
            depth = float(depth) * np.linalg.norm(k_inv @ np.array([u, v, 1.0]))
        rays.append(
            Ray(
                origin=origin,
                direction=d,
                frame=frame.index,
                pixel=(u, v),
                sky=bool(sky_mask[v, u]) if sky_mask is not None else False,
                lidar_depth=depth,
            )
        )
    return rays


def _stratified_depths(n, d_near, d_far, train, rng):
    edges = np.linspace(d_near, d_far, n + 1)
    if train:
        if rng is None:
            raise ContractError("train-mode sampling needs an rng")
        u = rng.uniform(size=n)
    else:
        u = np.full(n, 0.5)
    return edges[:-1] + u * (edges[1:] - edges[:-1])


def plane_samples(ray: Ray, n_planes, d_near, d_far, reference_pose: Pose, train=False, rng=None):
    """Distances where the ray crosses a stack of planes parallel to the
    reference image plane, stratified over [d_near, d_far].

    Plane depths are measured from the ray origin along the reference forward
    axis. Rays near-parallel to the planes (or looking backward) fall back to
    stratified sampling of t directly.
    """
    if not (0 < d_near < d_far):
        raise ContractError(f"need 0 < d_near < d_far, got ({d_near}, {d_far})")
    if n_planes < 2:
        raise ContractError("n_planes must be >= 2")
    depths = _stratified_depths(n_planes, d_near, d_far, train, rng)
    forward = reference_pose.rotation[:, 2]
    along = float(forward @ ray.direction)
    if along <= 1e-6:
        return depths
    return depths / along


def ray_box_intersect(origin, direction, half_extent=0.5):
    """Slab-method entrance/exit of an axis-aligned box, or None on a miss.

    Works in whatever units the ray is expressed in; the entrance is clamped
    to 0 when the origin is inside. Grazing contact or an exit behind the
    origin count as misses.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_a = (-half_extent - origin) / direction
        t_b = (half_extent - origin) / direction
    t_lo = np.minimum(t_a, t_b)
    t_hi = np.maximum(t_a, t_b)
    # axis-parallel components: inside the slab -> unbounded, outside -> miss
    flat = direction == 0
    if np.any(flat & (np.abs(origin) >= half_extent)):
        return None
    t_lo = np.where(flat, -np.inf, t_lo)
    t_hi = np.where(flat, np.inf, t_hi)
    t_enter = float(np.max(t_lo))
    t_exit = float(np.min(t_hi))
    if t_enter >= t_exit or t_exit <= 0:
        return None
    return max(t_enter, 0.0), t_exit


def box_stratified(t_enter, t_exit, n_box, train=False, rng=None):
    """Evenly spaced samples between entrance and exit, endpoints included.

    t_n = (n-1)/(N_d - 1) * (t_exit - t_enter) + t_enter. Train mode jitters
    within equal sub-intervals instead; a degenerate interval collapses to
    its midpoint.
    """
    if n_box < 2:
        raise ContractError("n_box must be >= 2")
    if t_exit <= t_enter:
        return np.array([0.5 * (t_enter + t_exit)])
    if train:
        if rng is None:
            raise ContractError("train-mode sampling needs an rng")
        return _stratified_depths(n_box, t_enter, t_exit, True, rng)
    n = np.arange(n_box, dtype=np.float64)
    out = n / (n_box - 1) * (t_exit - t_enter) + t_enter
    out[-1] = t_exit  # roundoff must not move the exit sample off the face
    return out


def gather_samples(ray: Ray, graph: SceneGraph, config: SamplingConfig, reference_pose: Pose, rng=None):
    """Merge background plane samples with per-object box samples, ascending.

    Objects without a pose at the ray's frame are absent from that frame.
    The far-field tail is implicit: compositing applies it through the
    residual transmittance rather than a literal sample at infinity.
    """
    t_bkg = plane_samples(
        ray, config.n_planes, config.d_near, config.d_far, reference_pose, config.train, rng
    )
    all_t = [t_bkg]
    all_tags = ["background"] * len(t_bkg)
    coords = [np.zeros((len(t_bkg), 3))]
    dirs = [np.zeros((len(t_bkg), 3))]

    half = 0.5 * config.shadow_scale
    for node_id, node in graph.nodes.items():
        if ray.frame not in node.pose_track:
            continue
        o_obj = world_to_object(ray.origin, node, ray.frame)
        d_obj = world_to_object_direction(ray.direction, node, ray.frame, normalize=False)
        hit = ray_box_intersect(o_obj, d_obj, half_extent=half)
        if hit is None:
            continue
        t_box = box_stratified(hit[0], hit[1], config.n_box, config.train, rng)
        all_t.append(t_box)
        all_tags += [node_id] * len(t_box)
        coords.append(o_obj + t_box[:, None] * d_obj)
        dirs.append(np.tile(d_obj / np.linalg.norm(d_obj), (len(t_box), 1)))

    t = np.concatenate(all_t)
    tags = np.array(all_tags, dtype=object)
    coords = np.concatenate(coords)
    dirs = np.concatenate(dirs)
    order = np.argsort(t, kind="stable")
    t = t[order]
    # exact ties are rare; nudge so the ascending invariant stays strict
    for i in range(1, len(t)):
        if t[i] <= t[i - 1]:
            t[i] = np.nextafter(t[i - 1], np.inf)
    if len(t) > 1:
        gaps = np.diff(t)
        delta = np.append(gaps, gaps[-1])
    else:
        delta = np.array([1.0])
    return SampleSet(
        t=t,
        delta=delta,
        tags=tuple(tags[order]),
        object_coords=coords[order],
        object_dirs=dirs[order],
    )
