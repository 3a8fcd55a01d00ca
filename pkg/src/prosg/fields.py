"""Learned scene representations.

Positional/directional encodings with a frequency-annealing mask, the
two-stage background MLP, the object shape/appearance branch (conv encoder
plus two residual-block decoders), and a far-field environment map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InputError, NumericError
from .numerics import tensor as T
from .numerics.nn import ConvNet, MlpParams, conv_forward, forward, init_conv, init_mlp, init_residual_mlp


# ---------------------------------------------------------------------------
# encodings


@dataclass
class EncodingConfig:
    """Frequency band counts and the annealing schedule shared by all fields."""

    l_position: int = 10
    l_direction: int = 4
    include_raw: bool = True
    t: int = 0
    t_final: int = 1

    def __post_init__(self):
        if self.l_position < 1 or self.l_direction < 1:
            raise ContractError("encoding band count must be >= 1")
        if self.t < 0 or self.t_final < 1:
            raise ContractError("mask schedule needs t >= 0 and t_final >= 1")

    def encode_position(self, x):
        return masked_encode(x, self)

    def encode_direction(self, d):
        return masked_encode(d, self, bands=self.l_direction)


def encoding_dim(in_dim, l_bands, include_raw=True):
    return in_dim * (2 * l_bands + (1 if include_raw else 0))


def positional_encode(x, l_bands, include_raw=False):
    """[sin(x), cos(x), ..., sin(2^{L-1} x), cos(2^{L-1} x)], band-major.

    Applied to the raw coordinate, no pi factor. With include_raw the
    untransformed input is prepended.
    """
    if l_bands < 1:
        raise ContractError("positional_encode needs l_bands >= 1")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64 if not isinstance(x, np.ndarray) else x.dtype))
    feats = [x] if include_raw else []
    for k in range(l_bands):
        s = (2.0**k) * x
        feats.append(np.sin(s))
        feats.append(np.cos(s))
    return np.concatenate(feats, axis=-1)


def frequency_mask(t, t_final, l_bands):
    """Band visibility at iteration t: 3 bands open at t=0, all open at t_final.

    1-based band index n: 1 for n <= tL/T + 3, the fractional part of tL/T on
    the single band after that, 0 beyond. One band fades in at a time; this
    keeps the mask elementwise monotone in t, where a shared ramp over a wider
    window would knock part-open bands back to zero whenever tL/T passes an
    integer.
    """
    if t_final < 1 or t < 0 or l_bands < 1:
        raise ContractError("frequency_mask needs t >= 0, t_final >= 1, l_bands >= 1")
    if t >= t_final:
        return np.ones(l_bands)
    r = t * l_bands / t_final
    n = np.arange(1, l_bands + 1, dtype=np.float64)
    return np.where(n <= r + 3, 1.0, np.where(n <= np.floor(r) + 4, r - np.floor(r), 0.0))


def masked_encode(x, config: EncodingConfig, bands=None):
    """Encoding with the frequency mask; each band's value hits its sin and cos."""
    l_bands = config.l_position if bands is None else bands
    enc = positional_encode(x, l_bands, include_raw=config.include_raw)
    mask = frequency_mask(config.t, config.t_final, l_bands)
    in_dim = np.atleast_1d(np.asarray(x)).shape[-1]
    parts = [np.ones(in_dim)] if config.include_raw else []
    for k in range(l_bands):
        parts.append(np.full(2 * in_dim, mask[k]))
    return enc * np.concatenate(parts)


def _check_unit(d, what):
    n = np.linalg.norm(np.atleast_2d(d), axis=-1)
    if np.any(np.abs(n - 1.0) > 1e-6):
        raise ContractError(f"{what} must be unit-length (max |norm-1| = {np.abs(n - 1).max():.3g})")


# ---------------------------------------------------------------------------
# background


@dataclass
class BackgroundField:
    """Two-stage MLP: stage 1 maps encoded position to [density logit, z],
    stage 2 maps [encoded direction, z] to color logits."""

    stage1: MlpParams
    stage2: MlpParams

    @property
    def z_dim(self):
        return self.stage1.out_dim - 1

    def parameters(self, prefix="background/"):
        out = self.stage1.parameters(prefix + "stage1/")
        out.update(self.stage2.parameters(prefix + "stage2/"))
        return out


def init_background(rng, config: EncodingConfig, hidden=96, z_dim=32, color_hidden=64):
    enc_x = encoding_dim(3, config.l_position, config.include_raw)
    enc_d = encoding_dim(3, config.l_direction, config.include_raw)
    stage1 = init_mlp(rng, [enc_x, hidden, hidden, 1 + z_dim])
    stage2 = init_mlp(rng, [enc_d + z_dim, color_hidden, 3])
    return BackgroundField(stage1, stage2)


def background_eval(x, d, bkg: BackgroundField, config: EncodingConfig):
    """Density and view-dependent color of the background field.

    Density comes from position alone; direction only enters the color stage.
    Returns (sigma (N,), rgb (N, 3)) tensors.
    """
    x = np.atleast_2d(np.asarray(x))
    d = np.atleast_2d(np.asarray(d))
    _check_unit(d, "view direction")
    enc_x = T.constant(config.encode_position(x))
    out1 = forward(bkg.stage1, enc_x)
    if not np.isfinite(out1.data).all():
        raise NumericError("non-finite activation in background stage 1")
    sigma = T.softplus(out1[:, 0])
    z = out1[:, 1:]
    enc_d = T.constant(config.encode_direction(d))
    out2 = forward(bkg.stage2, T.concat([enc_d, z], axis=1))
    if not np.isfinite(out2.data).all():
        raise NumericError("non-finite activation in background stage 2")
    return sigma, T.sigmoid(out2)


# ---------------------------------------------------------------------------
# object branch


@dataclass
class LatentCodes:
    """Shape and appearance codes for one object instance."""

    l_s: T.Tensor
    l_a: T.Tensor


@dataclass
class ObjectField:
    """Conv encoder with two linear heads, plus shape/appearance decoders.

    One ObjectField is shared by every instance with the same decoder key;
    instances differ only through their latent codes.
    """

    encoder: ConvNet
    head_shape: MlpParams
    head_appearance: MlpParams
    dec_shape: MlpParams
    dec_appearance: MlpParams
    hidden_dim: int

    @property
    def d_s(self):
        return self.head_shape.out_dim

    @property
    def d_a(self):
        return self.head_appearance.out_dim

    def parameters(self, prefix="object/"):
        out = self.encoder.parameters(prefix + "enc/")
        out.update(self.head_shape.parameters(prefix + "head_s/"))
        out.update(self.head_appearance.parameters(prefix + "head_a/"))
        out.update(self.dec_shape.parameters(prefix + "dec_s/"))
        out.update(self.dec_appearance.parameters(prefix + "dec_a/"))
        return out


def init_object_field(
    rng,
    config: EncodingConfig,
    d_s=128,
    d_a=128,
    hidden=128,
    hidden_dim=64,
    blocks=5,
    enc_channels=(3, 32, 64, 128, 128),
):
    enc_x = encoding_dim(3, config.l_position, config.include_raw)
    enc_d = encoding_dim(3, config.l_direction, config.include_raw)
    feat = enc_channels[-1]
    encoder = init_conv(rng, list(enc_channels))
    head_shape = init_mlp(rng, [feat, d_s])
    head_appearance = init_mlp(rng, [feat, d_a])
    dec_shape = init_residual_mlp(rng, enc_x + d_s, hidden, blocks, 1 + hidden_dim)
    dec_appearance = init_residual_mlp(rng, hidden_dim + enc_d + enc_x + d_s + d_a, hidden, blocks, 3)
    return ObjectField(encoder, head_shape, head_appearance, dec_shape, dec_appearance, hidden_dim)


CROP_RESOLUTION = 64


def crop_and_mask(image, mask, box_2d, resolution=CROP_RESOLUTION):
    """Cut the 2D box out of the image, zero background pixels, resize.

    box_2d is (x0, y0, x1, y1) in pixels, half-open. Nearest-neighbor resize;
    the crops only feed the latent encoder, not any reconstruction loss.
    """
    x0, y0, x1, y1 = (int(round(v)) for v in box_2d)
    h, w = image.shape[:2]
    x0, x1 = max(0, x0), min(w, x1)
    y0, y1 = max(0, y0), min(h, y1)
    if x1 <= x0 or y1 <= y0:
        raise InputError("2D box is empty after clipping to the image")
    sub_mask = mask[y0:y1, x0:x1]
    if not np.any(sub_mask):
        raise InputError("instance mask is empty inside the 2D box")
    sub = image[y0:y1, x0:x1].astype(np.float64) * sub_mask[..., None]
    rows = np.clip((np.arange(resolution) + 0.5) * (y1 - y0) / resolution, 0, y1 - y0 - 1).astype(int)
    cols = np.clip((np.arange(resolution) + 0.5) * (x1 - x0) / resolution, 0, x1 - x0 - 1).astype(int)
    return sub[rows][:, cols]


def encode_object(patch, obj: ObjectField):
    """Shape/appearance codes for one 64x64x3 masked crop, values in [0,1]."""
    patch = np.asarray(patch)
    if patch.shape != (CROP_RESOLUTION, CROP_RESOLUTION, 3):
        raise InputError(f"encoder expects a {CROP_RESOLUTION}x{CROP_RESOLUTION}x3 crop, got {patch.shape}")
    x = T.constant(patch.transpose(2, 0, 1)[None])
    feat = conv_forward(obj.encoder, x)
    pooled = feat.mean(axis=(2, 3))
    l_s = forward(obj.head_shape, pooled)
    l_a = forward(obj.head_appearance, pooled)
    return LatentCodes(l_s.reshape((obj.d_s,)), l_a.reshape((obj.d_a,)))


OBJECT_BOX_TOLERANCE = 0.7  # unit box is [-0.5, 0.5]; shadow scaling reaches 0.6


def object_eval(x_o, d_o, codes: LatentCodes, obj: ObjectField, config: EncodingConfig):
    """Density and color at object-space points.

    The shape decoder sees encoded position and the shape code and yields the
    density logit plus a hidden vector; the appearance decoder combines that
    hidden vector with encoded direction/position and both codes.
    """
    x_o = np.atleast_2d(np.asarray(x_o))
    d_o = np.atleast_2d(np.asarray(d_o))
    if np.any(np.abs(x_o) > OBJECT_BOX_TOLERANCE):
        raise ContractError(
            f"object-space point outside [-{OBJECT_BOX_TOLERANCE}, {OBJECT_BOX_TOLERANCE}]^3: "
            f"max |coord| = {np.abs(x_o).max():.4f}"
        )
    n = x_o.shape[0]
    enc_x = T.constant(config.encode_position(x_o))
    enc_d = T.constant(config.encode_direction(d_o / np.linalg.norm(d_o, axis=-1, keepdims=True)))
    l_s = T.broadcast_to(codes.l_s.reshape((1, obj.d_s)), (n, obj.d_s))
    l_a = T.broadcast_to(codes.l_a.reshape((1, obj.d_a)), (n, obj.d_a))
    out_s = forward(obj.dec_shape, T.concat([enc_x, l_s], axis=1))
    if not np.isfinite(out_s.data).all():
        raise NumericError("non-finite activation in object shape decoder")
    sigma = T.softplus(out_s[:, 0])
    hidden = out_s[:, 1:]
    out_a = forward(obj.dec_appearance, T.concat([hidden, enc_d, enc_x, l_s, l_a], axis=1))
    if not np.isfinite(out_a.data).all():
        raise NumericError("non-finite activation in object appearance decoder")
    return sigma, T.sigmoid(out_a)


# ---------------------------------------------------------------------------
# far field


@dataclass
class FarField:
    """Equirectangular grid of color logits indexed by ray direction."""

    grid: T.Tensor  # (H_e, W_e, 3)

    def __post_init__(self):
        h, w = self.grid.shape[:2]
        if h < 2 or w < 2:
            raise ContractError("far-field grid must be at least 2x2")

    def parameters(self, prefix="farfield/"):
        return {prefix + "grid": self.grid}


def init_farfield(rng, height=32, width=64, scale=1e-2):
    return FarField(T.parameter(scale * rng.standard_normal((height, width, 3))))


def farfield_lookup(d, far: FarField):
    """Bilinear fetch of environment logits for unit directions (N, 3).

    Azimuth wraps, elevation clamps at the poles. Texel (j, i) sits at
    azimuth (i+0.5)/W * 2pi - pi and elevation (0.5 - (j+0.5)/H) * pi,
    with row 0 at the top of the sphere (+z for a z-up world).
    """
    d = np.atleast_2d(np.asarray(d))
    _check_unit(d, "far-field direction")
    h, w = far.grid.shape[:2]
    az = np.arctan2(d[:, 1], d[:, 0])
    el = np.arcsin(np.clip(d[:, 2], -1.0, 1.0))
    u = (az + np.pi) / (2 * np.pi) * w - 0.5
    v = (0.5 - el / np.pi) * h - 0.5
    i0 = np.floor(u).astype(int)
    j0 = np.floor(v).astype(int)
    fu = u - i0
    fv = v - j0
    i0w, i1w = i0 % w, (i0 + 1) % w
    j0c = np.clip(j0, 0, h - 1)
    j1c = np.clip(j0 + 1, 0, h - 1)
    flat = far.grid.reshape((h * w, 3))
    corners = (
        ((1 - fu) * (1 - fv), j0c * w + i0w),
        (fu * (1 - fv), j0c * w + i1w),
        ((1 - fu) * fv, j1c * w + i0w),
        (fu * fv, j1c * w + i1w),
    )
    out = None
    for weight, idx in corners:
        term = T.gather(flat, idx) * weight[:, None]
        out = term if out is None else out + term
    return out


def farfield_eval(d, far: FarField):
    """Environment color for unit directions; sigmoid of the bilinear logits."""
    return T.sigmoid(farfield_lookup(d, far))
