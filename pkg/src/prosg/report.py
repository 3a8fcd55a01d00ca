"""Report emission: delimited tables, matplotlib figures, image quantization.

Everything here turns in-memory results (metric rows, training records,
rendered float images) into files next to each other in a report directory,
so a run leaves both machine-readable output and plots behind.
"""

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # file output only, no display server
import matplotlib.pyplot as plt
import numpy as np

from .errors import ContractError


# ---------------------------------------------------------------------------
# delimited tables


def write_csv(path, header, rows):
    """Write one table; every row is reordered/validated against the header."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ContractError(f"row width {len(row)} != header width {len(header)}")
            writer.writerow(row)
    return path


def format_table(header, rows):
    """Aligned text table for terminal output."""
    cells = [[str(h) for h in header]]
    for row in rows:
        cells.append([f"{v:.3f}" if isinstance(v, float) else str(v) for v in row])
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# figures


def training_curves(records, path):
    """Loss and PSNR curves from training records; returns the figure path."""
    path = Path(path)
    iters = [r["iter"] for r in records]
    fig, (ax_loss, ax_psnr) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("total", "L_c", "L_d", "L_sigma", "L_seg"):
        ax_loss.plot(iters, [r[key] for r in records], label=key, linewidth=1)
    ax_loss.set_yscale("log")
    ax_loss.set_xlabel("iteration")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=8)
    pts = [(r["iter"], r["psnr"]) for r in records if "psnr" in r]
    if pts:
        ax_psnr.plot(*zip(*pts), marker="o", markersize=3)
    ax_psnr.set_xlabel("iteration")
    ax_psnr.set_ylabel("train PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def eval_curves(per_frame, path):
    """Per-frame PSNR/SSIM lines, one pair per split tag.

    per_frame rows are (split, frame, psnr, ssim).
    """
    path = Path(path)
    fig, (ax_p, ax_s) = plt.subplots(1, 2, figsize=(10, 4))
    tags = sorted({row[0] for row in per_frame})
    for tag in tags:
        rows = [r for r in per_frame if r[0] == tag]
        frames = [r[1] for r in rows]
        ax_p.plot(frames, [r[2] for r in rows], marker="o", markersize=3, label=f"split {tag}")
        ax_s.plot(frames, [r[3] for r in rows], marker="o", markersize=3, label=f"split {tag}")
    ax_p.set_xlabel("frame")
    ax_p.set_ylabel("PSNR (dB)")
    ax_p.legend(fontsize=8)
    ax_s.set_xlabel("frame")
    ax_s.set_ylabel("SSIM")
    ax_s.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# image quantization


def quantize_image(color):
    """Float [0, 1] image to uint8, the single rounding rule used everywhere."""
    return np.clip(np.rint(np.asarray(color) * 255.0), 0, 255).astype(np.uint8)


def quantize_layers(color, layers):
    """Quantize decomposition layers so their uint8 sum equals the full image.

    Plain per-layer rounding can drift by one count per layer; largest
    remainder allocation pins the per-pixel integer sum to the quantized
    composite exactly.
    """
    full = quantize_image(color)
    names = list(layers)
    scaled = np.stack([np.clip(np.asarray(layers[k]), 0, None) * 255.0 for k in names])
    floors = np.floor(scaled)
    deficit = full.astype(np.int64) - floors.sum(axis=0).astype(np.int64)
    # layers hold nonnegative parts of the composite, so 0 <= deficit <= len(names)
    deficit = np.maximum(deficit, 0)
    remainder = scaled - floors
    order = np.argsort(-remainder, axis=0, kind="stable")
    rank = np.argsort(order, axis=0, kind="stable")
    out = floors.astype(np.int64) + (rank < deficit[None]).astype(np.int64)
    out = np.clip(out, 0, 255).astype(np.uint8)
    return {k: out[i] for i, k in enumerate(names)}
