"""Command-line entry point: gen, train, render, eval, edit, serve.

Configuration layers as defaults < config file < dotted --set overrides, and
the effective configuration is printed in full at startup. Exit codes: 1 for
usage errors, 2 for data errors, 3 for numeric failures.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import report
from .dataio import SyntheticConfig, generate_synthetic, load_scene, psnr, split, ssim, write_png
from .errors import ContractError, InputError, NumericError, ProsgError
from .fields import EncodingConfig
from .rendering import RenderConfig, render_image
from .sampling import SamplingConfig
from .scenegraph import (
    Pose,
    adopt_graph_structure,
    apply_edit_script,
    graph_to_json,
    parse_edit_script,
)
from .training import LossWeights, TrainConfig, load_state, train


class UsageError(Exception):
    """Bad command-line usage; maps to exit code 1."""


@dataclass
class RunConfig:
    """Resolved invocation: what to run and where its inputs and outputs live."""

    subcommand: str
    scene: Path | None = None
    out: Path | None = None
    overrides: dict = field(default_factory=dict)
    seed: int | None = None
    threads: int | None = None

    def __post_init__(self):
        self.scene = Path(self.scene) if self.scene is not None else None
        self.out = Path(self.out) if self.out is not None else None
        if self.threads is not None:
            if self.threads < 1:
                raise UsageError("--threads must be >= 1")
            # caps BLAS pools created after this point; running pools keep their size
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                        "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
                os.environ[var] = str(self.threads)

    def require(self, *paths):
        """Read commands demand their referenced paths up front."""
        for p in paths:
            if p is not None and not Path(p).exists():
                raise InputError(f"path {p} does not exist")
        return self


# ---------------------------------------------------------------------------
# config layering

OPEN_SECTIONS = {"fields"}  # free-form kwargs plumbed into field constructors


def merge_config(cfg, doc, error, path="", free=False):
    """Nested update of cfg from doc; unknown keys fail unless the subtree is open."""
    for k, v in doc.items():
        where = f"{path}.{k}" if path else str(k)
        if not free and k not in cfg:
            raise error(f"unknown config key '{where}'")
        if isinstance(v, dict):
            if not (isinstance(cfg.get(k), dict) or free or where in OPEN_SECTIONS):
                raise error(f"config key '{where}' does not take an object")
            cfg.setdefault(k, {})
            merge_config(cfg[k], v, error, where, free or where in OPEN_SECTIONS)
        elif isinstance(cfg.get(k), dict):
            raise error(f"config section '{where}' needs an object value")
        else:
            cfg[k] = v
    return cfg


def parse_overrides(pairs):
    """Dotted key=value strings into a nested document; values parse as JSON."""
    doc = {}
    for pair in pairs or []:
        key, sep, raw = pair.partition("=")
        key = key.strip()
        if not sep or not key:
            raise UsageError(f"--set expects dotted.key=value, got '{pair}'")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # unquoted strings pass through
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"--set key '{key}' descends into a non-object value")
        node[parts[-1]] = value
    return doc


def layer_config(defaults, config_path, sets):
    """defaults < config file < --set overrides; returns the merged dict."""
    cfg = defaults
    if config_path is not None:
        merge_config(cfg, _read_json(config_path, "config file"), InputError)
    merge_config(cfg, parse_overrides(sets), UsageError)
    return cfg


def train_defaults():
    sampling = asdict(SamplingConfig())
    sampling.pop("train")  # pipeline-owned toggle
    return {
        "train": asdict(TrainConfig()),
        "loss": asdict(LossWeights()),
        "sampling": sampling,
        "encoding": {"l_position": 10, "l_direction": 4, "include_raw": True},
        "depth_mode": "distance",
        "fields": {},
    }


def print_config(cfg):
    print(json.dumps(cfg, indent=2, sort_keys=True))


def _read_json(path, what="file"):
    path = Path(path)
    if not path.exists():
        raise InputError(f"{what} {path} does not exist")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"{what} {path} is not valid JSON: {e}") from e


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    run = RunConfig("gen", scene=args.spec, out=args.out,
                    overrides=parse_overrides(args.set), seed=args.seed,
                    threads=args.threads).require(args.spec)
    cfg = asdict(SyntheticConfig())
    merge_config(cfg, _read_json(run.scene, "scene spec"), InputError)
    merge_config(cfg, run.overrides, UsageError)
    if run.seed is not None:
        cfg["seed"] = run.seed
    print_config(cfg)
    out = generate_synthetic(SyntheticConfig(**cfg), run.out)
    print(f"wrote scene to {out}")


def cmd_train(args):
    run = RunConfig("train", scene=args.scene, out=args.out,
                    overrides=parse_overrides(args.set), seed=args.seed,
                    threads=args.threads).require(args.scene, args.config)
    cfg = train_defaults()
    if args.config is not None:
        merge_config(cfg, _read_json(args.config, "config file"), InputError)
    merge_config(cfg, run.overrides, UsageError)
    if run.seed is not None:
        cfg["train"]["seed"] = run.seed
    print_config(cfg)

    dataset = load_scene(run.scene)
    run.out.mkdir(parents=True, exist_ok=True)
    (run.out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    config = TrainConfig(**cfg["train"])
    weights = LossWeights(**cfg["loss"])
    render_config = RenderConfig(
        sampling=SamplingConfig(**cfg["sampling"]),
        encoding=EncodingConfig(**cfg["encoding"]),
        depth_mode=cfg["depth_mode"],
    )
    _, records = train(dataset, config, run.out, weights=weights,
                       render_config=render_config, field_sizes=cfg["fields"])
    fig = report.training_curves(records, run.out / "training_curves.png")
    print(f"wrote {run.out / 'metrics.ndjson'}")
    print(f"wrote {fig}")


def _pose_from_rows(rows, what):
    try:
        return Pose.from_matrix34(rows)
    except (ContractError, ValueError, TypeError) as e:
        raise InputError(f"{what}: {e}") from e


def _load_poses(args):
    if args.trajectory is not None:
        doc = _read_json(args.trajectory, "trajectory file")
        if not isinstance(doc, dict) or not isinstance(doc.get("poses"), list) or not doc["poses"]:
            raise InputError("trajectory file must contain a non-empty 'poses' list")
        return [_pose_from_rows(rows, f"poses[{i}]") for i, rows in enumerate(doc["poses"])]
    doc = _read_json(args.pose, "pose file")
    rows = doc.get("pose", doc) if isinstance(doc, dict) else doc
    return [_pose_from_rows(rows, "pose")]


def _image_size(args, graph):
    # principal point sits at the image center for every scene we emit
    width = args.width or int(round(2 * graph.intrinsics[0, 2]))
    height = args.height or int(round(2 * graph.intrinsics[1, 2]))
    if width < 1 or height < 1:
        raise UsageError("--width/--height must be >= 1")
    return width, height


def _write_render(out_dir, stem, image, layers):
    write_png(out_dir / f"{stem}.png", report.quantize_image(image.color))
    if layers:
        for name, quant in report.quantize_layers(image.color, image.layers).items():
            write_png(out_dir / f"{stem}_{name}.png", quant)


def cmd_render(args):
    run = RunConfig("render", scene=args.checkpoint, out=args.out,
                    threads=args.threads).require(args.checkpoint)
    state, config = load_state(run.scene)
    if args.graph is not None:
        adopt_graph_structure(state, _read_json(args.graph, "graph file"))
    poses = _load_poses(args)
    graph = state.graphs[-1].graph
    width, height = _image_size(args, graph)
    run.out.mkdir(parents=True, exist_ok=True)
    for k, pose in enumerate(poses):
        image = render_image(pose, graph.intrinsics, args.frame, state, config,
                             width, height, with_layers=args.layers)
        _write_render(run.out, f"render_{k:05d}", image, args.layers)
    print(f"wrote {len(poses)} render(s) to {run.out}")


def cmd_eval(args):
    run = RunConfig("eval", scene=args.scene, out=args.out,
                    threads=args.threads).require(args.checkpoint, args.scene)
    state, config = load_state(args.checkpoint)
    dataset = load_scene(run.scene)
    run.out.mkdir(parents=True, exist_ok=True)

    table, per_frame = [], []
    for tag in args.split:
        train_idx, test_idx = split(dataset, tag)
        indices = test_idx or train_idx  # "full" holds nothing out; score the training set
        scores = []
        for index in indices:
            frame = dataset.frame(index)
            image = render_image(frame.pose, frame.intrinsics, index, state, config,
                                 dataset.width, dataset.height, with_layers=False)
            p, s = float(psnr(image.color, frame.image)), float(ssim(image.color, frame.image))
            per_frame.append((tag, index, p, s))
            scores.append((p, s))
        table.append((tag, len(indices),
                      float(np.mean([p for p, _ in scores])),
                      float(np.mean([s for _, s in scores]))))

    header = ("split", "frames", "psnr", "ssim")
    print(report.format_table(header, table))
    report.write_csv(run.out / "metrics.csv", header, table)
    report.write_csv(run.out / "per_frame.csv", ("split", "frame", "psnr", "ssim"), per_frame)
    fig = report.eval_curves(per_frame, run.out / "eval_curves.png")
    print(f"wrote {run.out / 'metrics.csv'}")
    print(f"wrote {fig}")


def cmd_edit(args):
    run = RunConfig("edit", scene=args.checkpoint, out=args.out,
                    threads=args.threads).require(args.checkpoint, args.script)
    state, config = load_state(args.checkpoint)
    ops = parse_edit_script(_read_json(args.script, "edit script"))
    graph = state.graphs[-1].graph
    if args.frame not in graph.camera_poses:
        raise InputError(f"no camera pose for frame {args.frame}")
    pose = graph.camera_poses[args.frame]
    width, height = _image_size(args, graph)
    run.out.mkdir(parents=True, exist_ok=True)

    before = render_image(pose, graph.intrinsics, args.frame, state, config,
                          width, height, with_layers=True)
    apply_edit_script(state, ops)
    after = render_image(pose, graph.intrinsics, args.frame, state, config,
                         width, height, with_layers=True)
    _write_render(run.out, "before", before, args.layers)
    _write_render(run.out, "after", after, args.layers)
    doc = graph_to_json(state.graphs[-1].graph)
    (run.out / "graph_after.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    print(f"applied {len(ops)} op(s); wrote before/after renders and graph to {run.out}")


def cmd_serve(args):
    RunConfig("serve", scene=args.checkpoint, threads=args.threads).require(args.checkpoint)
    bind = args.bind or os.environ.get("PROSG_BIND", "127.0.0.1:8000")
    host, _, port = bind.rpartition(":")
    if not host or not port.isdigit():
        raise UsageError(f"bind address must be host:port, got '{bind}'")
    from .service import create_app  # deferred: keeps fast commands light

    app = create_app(checkpoint=args.checkpoint, max_width=args.max_width,
                     max_height=args.max_height, timeout=args.timeout)
    import uvicorn

    uvicorn.run(app, host=host, port=int(port), log_level="info")


# ---------------------------------------------------------------------------
# parser


class Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; the contract here is exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common_flags(p, sets=True):
    if sets:
        p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                       help="dotted config override, e.g. train.iterations=500")
    p.add_argument("--threads", type=int, default=None,
                   help="cap numeric worker threads")


def build_parser():
    parser = Parser(prog="prosg",
                    description="progressive neural scene graphs: data, training, rendering, editing")
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="command")

    p = sub.add_parser("gen", help="generate a synthetic scene directory",
                       description="Render an analytic scene to images, lidar, and masks.")
    p.add_argument("spec", help="JSON file of scene settings ({} takes every default)")
    p.add_argument("out", help="scene directory to create")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    _common_flags(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train on a scene directory",
                       description="Optimize the scene graph; writes metrics, checkpoints, figures.")
    p.add_argument("scene", help="scene directory (from gen or KITTI-format export)")
    p.add_argument("out", help="run directory for checkpoints and reports")
    p.add_argument("--config", default=None, help="JSON config file layered over defaults")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    _common_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render poses from a checkpoint",
                       description="Write one PNG per requested pose.")
    p.add_argument("checkpoint", help="checkpoint file (.prosg)")
    p.add_argument("out", help="directory for rendered images")
    where = p.add_mutually_exclusive_group(required=True)
    where.add_argument("--pose", default=None, help="JSON file with one 3x4 pose")
    where.add_argument("--trajectory", default=None,
                       help="JSON file {\"poses\": [3x4, ...]} rendered as a sequence")
    p.add_argument("--graph", default=None,
                   help="exported graph JSON applied before rendering")
    p.add_argument("--frame", type=int, default=0, help="frame index for object poses")
    p.add_argument("--width", type=int, default=None, help="image width (default from intrinsics)")
    p.add_argument("--height", type=int, default=None, help="image height (default from intrinsics)")
    p.add_argument("--layers", action="store_true", help="also write per-node layer images")
    _common_flags(p, sets=False)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="score a checkpoint against a scene",
                       description="Held-out PSNR/SSIM per split; table, CSV, and figure.")
    p.add_argument("checkpoint", help="checkpoint file (.prosg)")
    p.add_argument("scene", help="scene directory with ground truth")
    p.add_argument("--split", nargs="+", default=["full"], choices=["full", "75", "50", "25"],
                   help="split tags to score (held-out frames; full scores the training set)")
    p.add_argument("--out", required=True, help="report directory")
    _common_flags(p, sets=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("edit", help="apply an edit script and render before/after",
                       description="set_pose / insert / remove ops from a JSON script.")
    p.add_argument("checkpoint", help="checkpoint file (.prosg)")
    p.add_argument("script", help="edit script JSON file")
    p.add_argument("--out", required=True, help="directory for renders and the edited graph")
    p.add_argument("--frame", type=int, default=0, help="frame to render before/after")
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--layers", action="store_true", help="also write per-node layer images")
    _common_flags(p, sets=False)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("serve", help="serve the render/edit HTTP API",
                       description="Single-checkpoint service for the web editor.")
    p.add_argument("checkpoint", help="checkpoint file (.prosg)")
    p.add_argument("--bind", default=None, help="host:port (default env PROSG_BIND or 127.0.0.1:8000)")
    p.add_argument("--max-width", type=int, default=320, help="largest render width")
    p.add_argument("--max-height", type=int, default=240, help="largest render height")
    p.add_argument("--timeout", type=float, default=120.0, help="per-render timeout in seconds")
    _common_flags(p, sets=False)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except UsageError as e:
        print(f"prosg: error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"prosg: numeric failure: {e}", file=sys.stderr)
        return 3
    except ProsgError as e:
        print(f"prosg: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"prosg: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
