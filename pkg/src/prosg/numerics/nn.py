"""MLP building blocks on top of the autodiff tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError
from . import tensor as T

ACTIVATIONS = {
    "none": lambda x: x,
    "relu": T.relu,
    "softplus": T.softplus,
    "sigmoid": T.sigmoid,
    "sin": T.sin,
}


@dataclass
class Layer:
    """One fully-connected layer: out = act(x @ weight + bias), optional identity skip."""

    weight: T.Tensor  # (in_dim, out_dim)
    bias: T.Tensor  # (out_dim,)
    activation: str = "relu"
    residual: bool = False

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]


@dataclass
class MlpParams:
    """An ordered stack of layers; residual layers require in_dim == out_dim."""

    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        for k in range(1, len(self.layers)):
            prev, cur = self.layers[k - 1], self.layers[k]
            if prev.out_dim != cur.in_dim:
                raise ShapeError(
                    f"layer {k - 1} out_dim {prev.out_dim} does not feed layer {k} "
                    f"in_dim {cur.in_dim}"
                )
        for k, layer in enumerate(self.layers):
            if layer.residual and layer.in_dim != layer.out_dim:
                raise ShapeError(
                    f"residual layer {k} needs square weights, got "
                    f"{layer.in_dim} -> {layer.out_dim}"
                )

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def parameters(self, prefix=""):
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"{prefix}w{k}"] = layer.weight
            out[f"{prefix}b{k}"] = layer.bias
        return out


def forward(params: MlpParams, x: T.Tensor) -> T.Tensor:
    """Run the MLP; input last dimension must match the first layer's in_dim."""
    x = T.astensor(x)
    if x.shape[-1] != params.in_dim:
        raise ShapeError(
            f"input last dimension {x.shape} does not match first layer "
            f"in_dim ({params.in_dim},)"
        )
    h = x
    for layer in params.layers:
        pre = T.matmul(h, layer.weight) + layer.bias
        post = ACTIVATIONS[layer.activation](pre)
        h = post + h if layer.residual else post
    return h


def init_mlp(rng, dims, activation="relu", final_activation="none", residual=None):
    """He-initialized MLP for the given dimension chain.

    ``residual`` optionally flags layers (aligned with the hidden layers) that
    get an identity skip; the decoders use this for their residual blocks.
    """
    layers = []
    n = len(dims) - 1
    for k in range(n):
        fan_in = dims[k]
        std = np.sqrt(2.0 / fan_in)
        w = rng.standard_normal((dims[k], dims[k + 1])) * std
        b = np.zeros(dims[k + 1])
        act = activation if k < n - 1 else final_activation
        res = bool(residual[k]) if residual is not None else False
        layers.append(
            Layer(
                weight=T.parameter(w.astype(T.default_dtype())),
                bias=T.parameter(b.astype(T.default_dtype())),
                activation=act,
                residual=res,
            )
        )
    return MlpParams(layers)


def init_residual_mlp(rng, in_dim, hidden, blocks, out_dim, activation="relu"):
    """Entry layer, ``blocks`` hidden residual layers, then a linear head."""
    dims = [in_dim] + [hidden] * (blocks + 1) + [out_dim]
    residual = [False] + [True] * blocks + [False]
    return init_mlp(rng, dims, activation=activation, residual=residual)


@dataclass
class ConvLayer:
    weight: T.Tensor  # (out_ch, in_ch, kh, kw)
    bias: T.Tensor
    stride: int = 2


@dataclass
class ConvNet:
    """Small strided conv stack used by the image encoder."""

    layers: list[ConvLayer]

    def parameters(self, prefix=""):
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"{prefix}cw{k}"] = layer.weight
            out[f"{prefix}cb{k}"] = layer.bias
        return out


def conv_forward(net: ConvNet, x: T.Tensor) -> T.Tensor:
    h = x
    for layer in net.layers:
        h = T.relu(T.conv2d(h, layer.weight, layer.bias, stride=layer.stride, pad=1))
    return h


def init_conv(rng, channels, kernel=3, stride=2):
    layers = []
    for cin, cout in zip(channels[:-1], channels[1:]):
        std = np.sqrt(2.0 / (cin * kernel * kernel))
        w = rng.standard_normal((cout, cin, kernel, kernel)) * std
        b = np.zeros(cout)
        layers.append(
            ConvLayer(
                weight=T.parameter(w.astype(T.default_dtype())),
                bias=T.parameter(b.astype(T.default_dtype())),
                stride=stride,
            )
        )
    return ConvNet(layers)
