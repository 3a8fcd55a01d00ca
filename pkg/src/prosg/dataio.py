"""Scene datasets: manifest IO, synthetic scenes with exact ground truth,
the train/test split protocol, and image metrics.

The synthetic generator rasterizes with its own closed-form code path
(separate ray setup, separate box intersection, no shared compositing), so
its images, depths, and masks can serve as an oracle for the neural
renderer rather than a mirror of it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError, ShapeError
from .scenegraph import ObjectTrack, Pose

SCENE_VERSION = "prosg-scene/1"


# ---------------------------------------------------------------------------
# file primitives


def write_png(path, array):
    """Save a float image in [0, 1] (or a uint8 array) as PNG."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path):
    """Load a PNG as float64 in [0, 1] (masks keep their channel count)."""
    with Image.open(path) as img:
        arr = np.asarray(img)
    return arr.astype(np.float64) / 255.0


def read_mask(path):
    with Image.open(path) as img:
        arr = np.asarray(img)
    return arr > 127


def read_index_mask(path):
    """Instance masks store 0 for none and (track row + 1) elsewhere."""
    with Image.open(path) as img:
        return np.asarray(img).astype(np.int64)


def write_lidar(path, points):
    """Little-endian float32 x, y, z triples."""
    pts = np.ascontiguousarray(np.asarray(points, dtype="<f4").reshape(-1, 3))
    Path(path).write_bytes(pts.tobytes())


def read_lidar(path):
    blob = Path(path).read_bytes()
    if len(blob) % 12:
        raise InputError(f"lidar file {path} is not a sequence of float32 xyz triples")
    return np.frombuffer(blob, dtype="<f4").reshape(-1, 3).astype(np.float64)


def write_pfm(path, array):
    """Portable float map, little-endian, rows bottom to top."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 2:
        header = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF"
    else:
        raise ShapeError(f"pfm wants (H, W) or (H, W, 3), got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(arr[::-1]).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise InputError(f"{path} is not a float map (header {header!r})")
        width, height = map(int, fh.readline().split())
        scale = float(fh.readline())
        data = np.frombuffer(fh.read(), dtype="<f4" if scale < 0 else ">f4")
    channels = 3 if header == b"PF" else 1
    arr = data.reshape(height, width, channels)[::-1].astype(np.float64)
    return arr[:, :, 0] if channels == 1 else arr


# ---------------------------------------------------------------------------
# dataset types


@dataclass(eq=False)
class Frame:
    index: int
    pose: Pose
    intrinsics: np.ndarray
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    lidar_points: np.ndarray  # (N, 3) world coordinates
    sky_mask: np.ndarray  # (H, W) bool
    instance_mask: np.ndarray  # (H, W) int, 0 = none, i+1 = track row i
    split: str | None = None
    lidar_map: dict | None = None  # filled in by the training pipeline


@dataclass(eq=False)
class SceneDataset:
    root: Path
    width: int
    height: int
    frames: list
    tracks: list

    def frame(self, index):
        for f in self.frames:
            if f.index == index:
                return f
        raise InputError(f"no frame with index {index}")


def _pose_from_rows(rows, what):
    mat = np.asarray(rows, dtype=np.float64)
    if mat.shape != (3, 4):
        raise InputError(f"{what}: pose must be 3x4, got {mat.shape}")
    r, t = mat[:, :3], mat[:, 3]
    drift = np.abs(r @ r.T - np.eye(3)).max()
    if drift > 1e-3:
        raise InputError(f"{what}: rotation is {drift:.2e} from orthonormal, above 1e-3")
    if drift > 1e-9:
        u, _, vt = np.linalg.svd(r)
        r = u @ vt
        if np.linalg.det(r) < 0:
            u[:, -1] = -u[:, -1]
            r = u @ vt
    return Pose(r, t)


def load_scene(root) -> SceneDataset:
    """Load and validate a scene directory against its manifest."""
    root = Path(root)
    manifest = root / "scene.json"
    if not manifest.exists():
        raise InputError(f"no manifest at {manifest}")
    doc = json.loads(manifest.read_text())
    if doc.get("version") != SCENE_VERSION:
        raise InputError(f"unsupported scene version {doc.get('version')!r}")
    width, height = int(doc["width"]), int(doc["height"])

    def existing(rel, what):
        path = root / rel
        if not path.exists():
            raise InputError(f"{what} file missing: {path}")
        return path

    tracks = []
    for rec in doc.get("tracks", []):
        poses = {
            int(k): _pose_from_rows(v, f"track {rec['id']} frame {k}")
            for k, v in rec["poses"].items()
        }
        tracks.append(ObjectTrack(rec["id"], rec["class"], np.asarray(rec["size"], float), poses))

    frames = []
    for rec in doc["frames"]:
        idx = int(rec["index"])
        image = read_png(existing(rec["image"], "image"))
        if image.shape[:2] != (height, width):
            raise InputError(
                f"image {rec['image']} is {image.shape[1]}x{image.shape[0]}, "
                f"manifest says {width}x{height}"
            )
        sky = read_mask(existing(rec["sky_mask"], "sky mask"))
        inst = read_index_mask(existing(rec["instance_mask"], "instance mask"))
        for mask, name in ((sky, "sky mask"), (inst, "instance mask")):
            if mask.shape != (height, width):
                raise InputError(f"{name} for frame {idx} is {mask.shape}, wants {(height, width)}")
        if inst.max(initial=0) > len(tracks):
            raise InputError(f"instance mask for frame {idx} references track {inst.max()}, "
                             f"but only {len(tracks)} tracks exist")
        frames.append(
            Frame(
                index=idx,
                pose=_pose_from_rows(rec["pose"], f"frame {idx}"),
                intrinsics=np.asarray(rec["intrinsics"], dtype=np.float64),
                image=image,
                lidar_points=read_lidar(existing(rec["lidar"], "lidar")),
                sky_mask=sky,
                instance_mask=inst,
                split=rec.get("split"),
            )
        )
    frames.sort(key=lambda f: f.index)
    frame_ids = {f.index for f in frames}
    for track in tracks:
        missing = set(track.poses) - frame_ids
        if missing:
            raise InputError(f"track {track.track_id} has poses at unknown frames {sorted(missing)}")
    return SceneDataset(root=root, width=width, height=height, frames=frames, tracks=tracks)


def instance_box(mask, value):
    """Tight (u0, v0, u1, v1) pixel box of mask == value, or None."""
    vs, us = np.nonzero(mask == value)
    if not len(vs):
        return None
    return int(us.min()), int(vs.min()), int(us.max()) + 1, int(vs.max()) + 1


# ---------------------------------------------------------------------------
# splits


def split(dataset, tag):
    """Train/test frame indices for a hold-out ratio tag.

    "full" keeps everything for training; "75" holds out indices = 3 mod 4;
    "50" holds out odd indices; "25" trains on indices = 0 mod 4 only.
    """
    indices = sorted(f.index for f in dataset.frames)
    if len(indices) < 4:
        raise InputError("splitting needs at least 4 frames")
    if tag == "full":
        test = []
    elif tag == "75":
        test = [i for i in indices if i % 4 == 3]
    elif tag == "50":
        test = [i for i in indices if i % 2 == 1]
    elif tag == "25":
        test = [i for i in indices if i % 4 != 0]
    else:
        raise InputError(f"unknown split tag {tag!r}, wanted full/75/50/25")
    test_set = set(test)
    train = [i for i in indices if i not in test_set]
    return train, test


# ---------------------------------------------------------------------------
# metrics


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for images in [0, 1], capped at 99."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return 99.0
    return min(99.0, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, k1=0.01, k2=0.03):
    """Mean structural similarity over all full 11x11 windows and channels."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.shape[0] < 11 or a.shape[1] < 11:
        raise InputError("ssim needs images at least 11x11")
    kern = _gaussian_window()
    c1, c2 = k1**2, k2**2

    def local_mean(x):
        win = np.lib.stride_tricks.sliding_window_view(x, (11, 11))
        return np.tensordot(win, kern, axes=([2, 3], [0, 1]))

    scores = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mx, my = local_mean(x), local_mean(y)
        vx = local_mean(x * x) - mx * mx
        vy = local_mean(y * y) - my * my
        vxy = local_mean(x * y) - mx * my
        score = ((2 * mx * my + c1) * (2 * vxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
        scores.append(score.mean())
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SyntheticConfig:
    width: int = 64
    height: int = 48
    n_frames: int = 24
    n_objects: int = 2
    focal: float = 50.0
    camera_height: float = 1.5
    camera_step: float = 0.5  # forward motion per frame, +x
    lidar_stride: int = 3
    ground_radius: float = 45.0  # ground fades into the horizon beyond this
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_objects <= 3:
            raise InputError("n_objects must be 1..3")
        if self.n_frames < 4:
            raise InputError("n_frames must be at least 4")
        if self.width < 16 or self.height < 16:
            raise InputError("images must be at least 16x16")

    @property
    def intrinsics(self):
        return np.array(
            [[self.focal, 0, self.width / 2.0], [0, self.focal, self.height / 2.0], [0, 0, 1]]
        )


# camera looks along +x in a z-up world; columns are right, down, forward
CAMERA_AXES = np.array([[0.0, 0, 1], [-1.0, 0, 0], [0, -1.0, 0]])

SKY_GRID_SHAPE = (32, 64)  # elevation rows (top first), azimuth columns
DUSK = np.array([0.32, 0.30, 0.36])  # ground color at the fade-out radius


@dataclass(eq=False)
class SyntheticScene:
    """Deterministic analytic description used by the rasterizer."""

    config: SyntheticConfig
    camera_poses: dict
    tracks: list
    face_colors: dict  # track id -> (6, 3) base colors
    sky_grid: np.ndarray  # (32, 64, 3)


def synthetic_scene(config: SyntheticConfig) -> SyntheticScene:
    rng = np.random.default_rng(config.seed)

    j, i = np.meshgrid(np.arange(SKY_GRID_SHAPE[0]), np.arange(SKY_GRID_SHAPE[1]), indexing="ij")
    checker = ((i // 4 + j // 4) % 2).astype(np.float64)
    bright = np.array([0.55, 0.66, 0.92])
    dim = np.array([0.30, 0.40, 0.72])
    ramp = (0.85 + 0.3 * (j / (SKY_GRID_SHAPE[0] - 1)))[:, :, None]
    sky_grid = np.clip((checker[:, :, None] * bright + (1 - checker[:, :, None]) * dim) * ramp, 0.02, 0.98)
    # rows at and below the horizon meet the faded ground color, so rays
    # skimming past the ground disk blend smoothly instead of jumping
    sky_grid[SKY_GRID_SHAPE[0] // 2 :] = DUSK

    camera_poses = {
        k: Pose(CAMERA_AXES.copy(), np.array([k * config.camera_step, 0.0, config.camera_height]))
        for k in range(config.n_frames)
    }

    tracks, face_colors = [], {}
    lateral = [-2.2, 2.4, 0.3]
    speeds = [(0.35, 0.0), (0.0, -0.12), (0.0, 0.0)]
    yaw_rates = [0.0, np.deg2rad(2.0), np.deg2rad(-1.0)]
    for k in range(config.n_objects):
        size = rng.uniform(1.2, 2.2, size=3)
        start = np.array([9.0 + 6.5 * k, lateral[k], size[2] / 2.0])
        vx, vy = speeds[k]
        poses = {}
        for f in range(config.n_frames):
            yaw = yaw_rates[k] * f
            c, s = np.cos(yaw), np.sin(yaw)
            rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
            poses[f] = Pose(rot, start + np.array([vx * f, vy * f, 0.0]))
        track_id = f"obj_{k}"
        tracks.append(ObjectTrack(track_id, "box", size, poses))
        face_colors[track_id] = rng.uniform(0.25, 0.9, size=(6, 3))

    return SyntheticScene(config, camera_poses, tracks, face_colors, sky_grid)


def _ground_color(x, y, config):
    """Smooth low-frequency ground texture fading to a constant dusk tone."""
    r = np.hypot(x, y)
    red = 0.45 + 0.22 * np.sin(0.31 * x) * np.cos(0.23 * y)
    grn = 0.42 + 0.22 * np.sin(0.19 * x + 1.3) * np.cos(0.29 * y + 0.4)
    blu = 0.36 + 0.18 * np.cos(0.26 * x - 0.8) * np.sin(0.17 * y + 2.1)
    color = np.stack([red, grn, blu], axis=-1)
    fade = np.clip(r / config.ground_radius, 0.0, 1.0)[..., None] ** 2
    return color * (1 - fade) + DUSK * fade


def _sky_color(dirs, sky_grid):
    """Bilinear lookup into the sky grid, azimuth wrapping, elevation clamped."""
    az = np.arctan2(dirs[:, 1], dirs[:, 0])
    el = np.arcsin(np.clip(dirs[:, 2], -1.0, 1.0))
    h, w = sky_grid.shape[:2]
    u = (az + np.pi) / (2 * np.pi) * w - 0.5
    v = (0.5 - el / np.pi) * h - 0.5
    i0 = np.floor(u).astype(int)
    j0 = np.floor(v).astype(int)
    fu, fv = u - i0, v - j0
    out = np.zeros((len(dirs), 3))
    for dj, di, wgt in (
        (0, 0, (1 - fu) * (1 - fv)),
        (0, 1, fu * (1 - fv)),
        (1, 0, (1 - fu) * fv),
        (1, 1, fu * fv),
    ):
        jj = np.clip(j0 + dj, 0, h - 1)
        ii = (i0 + di) % w
        out += wgt[:, None] * sky_grid[jj, ii]
    return out


def _box_faces(o, d, pose: Pose, size):
    """Entry distance and face shading coordinates for rays against one box.

    Returns (t, face index 0..5, face u, face v) with t = +inf on miss. Kept
    separate from the renderer's sampling code on purpose.
    """
    half = np.asarray(size, float) / 2.0
    ob = (o - pose.translation) @ pose.rotation
    db = d @ pose.rotation
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - ob) / db
        t2 = (half - ob) / db
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    flat = db == 0
    inside = np.abs(ob) < half
    lo = np.where(flat, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(flat, np.where(inside, np.inf, -np.inf), hi)
    axis = np.argmax(lo, axis=1)
    t_enter = lo.max(axis=1)
    t_exit = hi.min(axis=1)
    hit = (t_enter < t_exit) & (t_exit > 0) & (t_enter > 0)
    t = np.where(hit, t_enter, np.inf)

    with np.errstate(invalid="ignore"):
        p = ob + t[:, None] * db
    sign_axis = np.take_along_axis(np.sign(db), axis[:, None], 1)[:, 0]
    face = axis * 2 + (sign_axis > 0)  # entering against the axis sign
    ua, va = (axis + 1) % 3, (axis + 2) % 3
    fu = np.take_along_axis(p, ua[:, None], 1)[:, 0] / np.take_along_axis(np.broadcast_to(half, p.shape), ua[:, None], 1)[:, 0]
    fv = np.take_along_axis(p, va[:, None], 1)[:, 0] / np.take_along_axis(np.broadcast_to(half, p.shape), va[:, None], 1)[:, 0]
    return t, face.astype(int), 0.5 * (fu + 1), 0.5 * (fv + 1)


def rasterize_frame(scene: SyntheticScene, frame_index):
    """Closed-form render: color, range depth, sky mask, instance mask."""
    config = scene.config
    w, h = config.width, config.height
    pose = scene.camera_poses[frame_index]

    us, vs = np.meshgrid(np.arange(w), np.arange(h))
    uv1 = np.stack([us.ravel(), vs.ravel(), np.ones(w * h)], axis=1).astype(np.float64)
    cam = uv1 @ np.linalg.inv(config.intrinsics).T
    cam /= np.linalg.norm(cam, axis=1, keepdims=True)
    dirs = cam @ pose.rotation.T
    o = pose.translation

    n = w * h
    t_best = np.full(n, np.inf)
    color = np.zeros((n, 3))
    instance = np.zeros(n, dtype=np.int64)

    # ground plane z = 0
    down = dirs[:, 2] < -1e-9
    t_ground = np.where(down, -o[2] / np.where(down, dirs[:, 2], -1.0), np.inf)
    with np.errstate(invalid="ignore"):
        gx = o[0] + t_ground * dirs[:, 0]
        gy = o[1] + t_ground * dirs[:, 1]
    ground_ok = down & (np.hypot(gx, gy) <= config.ground_radius)
    t_best = np.where(ground_ok, t_ground, np.inf)
    color[ground_ok] = _ground_color(gx[ground_ok], gy[ground_ok], config)

    for row, track in enumerate(scene.tracks):
        if frame_index not in track.poses:
            continue
        t, face, fu, fv = _box_faces(o, dirs, track.poses[frame_index], track.size)
        closer = t < t_best
        base = scene.face_colors[track.track_id][face[closer]]
        shade = (0.6 + 0.25 * fu[closer] + 0.15 * fv[closer])[:, None]
        color[closer] = np.clip(base * shade, 0.0, 1.0)
        instance[closer] = row + 1
        t_best = np.where(closer, t, t_best)

    sky = ~np.isfinite(t_best)
    color[sky] = _sky_color(dirs[sky], scene.sky_grid)
    depth = np.where(sky, 0.0, t_best)

    shape = (h, w)
    return (
        color.reshape(h, w, 3),
        depth.reshape(shape),
        sky.reshape(shape),
        instance.reshape(shape),
        dirs.reshape(h, w, 3),
    )


def generate_synthetic(config: SyntheticConfig, root) -> Path:
    """Write a full synthetic scene directory; returns the root path."""
    root = Path(root)
    for sub in ("images", "lidar", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    scene = synthetic_scene(config)

    frames_doc = []
    for k in range(config.n_frames):
        color, depth, sky, instance, dirs = rasterize_frame(scene, k)
        name = f"{k:05d}"
        write_png(root / "images" / f"frame_{name}.png", color)
        write_png(root / "masks" / f"sky_{name}.png", np.where(sky, 255, 0).astype(np.uint8))
        write_png(root / "masks" / f"inst_{name}.png", instance.astype(np.uint8))

        stride = config.lidar_stride
        pick = np.zeros_like(sky)
        pick[::stride, ::stride] = True
        pick &= ~sky & (depth > 0)
        origin = scene.camera_poses[k].translation
        points = origin + depth[pick, None] * dirs[pick]
        write_lidar(root / "lidar" / f"frame_{name}.bin", points)

        pose = scene.camera_poses[k]
        frames_doc.append(
            {
                "index": k,
                "image": f"images/frame_{name}.png",
                "pose": pose.matrix34().tolist(),
                "intrinsics": config.intrinsics.tolist(),
                "lidar": f"lidar/frame_{name}.bin",
                "sky_mask": f"masks/sky_{name}.png",
                "instance_mask": f"masks/inst_{name}.png",
            }
        )

    tracks_doc = [
        {
            "id": t.track_id,
            "class": t.class_tag,
            "size": np.asarray(t.size).tolist(),
            "poses": {str(f): p.matrix34().tolist() for f, p in sorted(t.poses.items())},
        }
        for t in scene.tracks
    ]
    doc = {
        "version": SCENE_VERSION,
        "width": config.width,
        "height": config.height,
        "frames": frames_doc,
        "tracks": tracks_doc,
    }
    (root / "scene.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return root
