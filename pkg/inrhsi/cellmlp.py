"""Per-cell MLP: flat parameter vectors unpacked into layers and evaluated on pixels.

Flat layout, fixed for checkpoint stability: layer 0 weights (row-major, fan_in x fan_out),
layer 0 bias, layer 1 weights, layer 1 bias, and so on. Weights are multiplied by
1/sqrt(fan_in) when unpacked.
"""
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from inrhsi import diffcore
from inrhsi.diffcore import Tensor
from inrhsi.encoding import EncodingConfig
from inrhsi.errors import ConfigurationError, DimensionError, LayoutError

RGB_CHANNELS = 3
DEFAULT_HIDDEN_WIDTH = 64
DEFAULT_HIDDEN_LAYERS = 5
DEFAULT_BANDS = 31
HIDDEN_ACTIVATIONS = ("leaky_relu", "relu")
OUTPUT_ACTIVATIONS = ("sigmoid", "clamp")


class LayerSlice(NamedTuple):
    fan_in: int
    fan_out: int
    weight_start: int
    weight_stop: int
    bias_start: int
    bias_stop: int


@dataclass(frozen=True)
class MlpLayout:
    in_dim: int
    hidden_width: int = DEFAULT_HIDDEN_WIDTH
    n_hidden: int = DEFAULT_HIDDEN_LAYERS
    out_dim: int = DEFAULT_BANDS
    activation: str = "leaky_relu"
    output_activation: str = "sigmoid"
    slope: float = diffcore.DEFAULT_SLOPE

    def __post_init__(self):
        for label, value in (("in_dim", self.in_dim), ("hidden_width", self.hidden_width),
                             ("n_hidden", self.n_hidden), ("out_dim", self.out_dim)):
            if value < 1:
                raise ConfigurationError(f"MLP {label} must be positive, got {value}")
        if self.activation not in HIDDEN_ACTIVATIONS:
            raise ConfigurationError(f"Unknown hidden activation {self.activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigurationError(f"Unknown output activation {self.output_activation!r}")

    @classmethod
    def for_encoding(cls, encoding, **kwargs):
        return cls(in_dim=RGB_CHANNELS + encoding.dim, **kwargs)

    @property
    def layer_dims(self):
        dims = [(self.in_dim, self.hidden_width)]
        dims += [(self.hidden_width, self.hidden_width)] * (self.n_hidden - 1)
        dims.append((self.hidden_width, self.out_dim))
        return dims

    @property
    def offsets(self):
        slices = []
        cursor = 0
        for fan_in, fan_out in self.layer_dims:
            weight_stop = cursor + fan_in * fan_out
            bias_stop = weight_stop + fan_out
            slices.append(LayerSlice(fan_in, fan_out, cursor, weight_stop, weight_stop, bias_stop))
            cursor = bias_stop
        return slices

    @property
    def total(self):
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_dims)


DEFAULT_LAYOUT = MlpLayout.for_encoding(EncodingConfig())


@dataclass
class CellParams:
    flat: Tensor
    layout: MlpLayout

    def __post_init__(self):
        if self.flat.ndim != 1 or self.flat.shape[0] != self.layout.total:
            raise LayoutError(
                f"Cell parameter vector has shape {self.flat.shape}, layout needs {self.layout.total} scalars"
            )


def unpack(params):
    """Slice a cell's flat vector into [(weight, bias), ...] tensors, gradients preserved."""
    layers = []
    for layer in params.layout.offsets:
        weight = diffcore.getitem(params.flat, slice(layer.weight_start, layer.weight_stop))
        weight = diffcore.scale(diffcore.reshape(weight, (layer.fan_in, layer.fan_out)), 1.0 / math.sqrt(layer.fan_in))
        bias = diffcore.getitem(params.flat, slice(layer.bias_start, layer.bias_stop))
        layers.append((weight, bias))
    return layers


def pack(layers, layout):
    """Inverse of unpack: flat numpy vector from per-layer weights and biases."""
    if len(layers) != len(layout.offsets):
        raise LayoutError(f"Expected {len(layout.offsets)} layers, got {len(layers)}")
    flat = np.empty(layout.total, dtype=np.float64)
    for (weight, bias), layer in zip(layers, layout.offsets):
        weight = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
        bias = bias.data if isinstance(bias, Tensor) else np.asarray(bias)
        if weight.shape != (layer.fan_in, layer.fan_out) or bias.shape != (layer.fan_out,):
            raise LayoutError(f"Layer shapes {weight.shape}/{bias.shape} do not match layout {layer}")
        flat[layer.weight_start:layer.weight_stop] = (weight * math.sqrt(layer.fan_in)).reshape(-1)
        flat[layer.bias_start:layer.bias_stop] = bias
    return flat


def _hidden(h, layout):
    if layout.activation == "relu":
        return diffcore.relu(h)
    return diffcore.leaky_relu(h, layout.slope)


def _squash(h, layout):
    if layout.output_activation == "clamp":
        return diffcore.clamp_unit(h)
    return diffcore.sigmoid(h)


def mlp_forward(x, layers, layout):
    """Hidden affine + activation layers, then the output layer squashed into [0, 1]."""
    if x.ndim != 2 or x.shape[1] != layout.in_dim:
        raise DimensionError(f"MLP input shape {x.shape} does not match layout in_dim {layout.in_dim}")
    h = x
    last = len(layers) - 1
    for index, (weight, bias) in enumerate(layers):
        h = diffcore.dense_forward(h, weight, bias)
        if index < last:
            h = _hidden(h, layout)
    return _squash(h, layout)


def batched_mlp_forward(inputs, cells, layout):
    """Evaluate every cell at once: inputs[G, B, in_dim] with cells[G, total] -> [G, B, out_dim]."""
    groups = cells.shape[0]
    if inputs.ndim != 3 or inputs.shape[0] != groups or inputs.shape[2] != layout.in_dim:
        raise DimensionError(f"Batched MLP input shape {inputs.shape} does not fit cell grid {cells.shape}")
    h = inputs
    last = len(layout.offsets) - 1
    for index, layer in enumerate(layout.offsets):
        weight = diffcore.getitem(cells, (slice(None), slice(layer.weight_start, layer.weight_stop)))
        weight = diffcore.reshape(weight, (groups, layer.fan_in, layer.fan_out))
        weight = diffcore.scale(weight, 1.0 / math.sqrt(layer.fan_in))
        bias = diffcore.getitem(cells, (slice(None), slice(layer.bias_start, layer.bias_stop)))
        bias = diffcore.reshape(bias, (groups, 1, layer.fan_out))
        h = diffcore.add(diffcore.matmul(h, weight), bias)
        if index < last:
            h = _hidden(h, layout)
    return _squash(h, layout)


def pixel_inputs(rgb, enc):
    """Stack [X_p, gamma(p)] per pixel: rgb[3, h, w], enc[h, w, D] -> [h, w, 3 + D]."""
    rgb = rgb.data if isinstance(rgb, Tensor) else np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != RGB_CHANNELS:
        raise DimensionError(f"RGB patch must be [3, h, w], got {rgb.shape}")
    if enc.shape[:2] != rgb.shape[1:]:
        raise DimensionError(f"Encoding grid {enc.shape} does not cover RGB patch {rgb.shape}")
    return np.concatenate([np.transpose(rgb, (1, 2, 0)), enc], axis=-1)


def evaluate_patch(x_patch, enc, params):
    """Spectra for one cell's pixels, shaped [L, h, w].

    ``enc`` must hold the encodings of the cell's global pixel coordinates.
    """
    stacked = pixel_inputs(x_patch, enc)
    height, width, in_dim = stacked.shape
    inputs = Tensor(stacked.reshape(height * width, in_dim), precision=params.flat.precision)
    spectra = mlp_forward(inputs, unpack(params), params.layout)
    spectra = diffcore.transpose(spectra, (1, 0))
    return diffcore.reshape(spectra, (params.layout.out_dim, height, width))
