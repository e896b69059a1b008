"""Hypernetwork producing the S x S grid of per-cell MLP parameters from an RGB patch.

Stride-2 convolutions shrink the patch from P to S pixels; an estimator of stride-1 blocks
with spatially-adaptive normalisation keeps the S x S size; a final 1x1 convolution emits one
parameter vector per grid position.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from inrhsi import diffcore
from inrhsi.cellmlp import DEFAULT_LAYOUT, RGB_CHANNELS, CellParams, MlpLayout
from inrhsi.diffcore import Precision, Tensor
from inrhsi.errors import CompatibilityError, ConfigurationError, DimensionError, LayoutError

logger = logging.getLogger(__name__)

DEFAULT_CHANNELS = (64, 128, 128, 256, 256)
DEFAULT_PATCH = 64
DEFAULT_GRID = 16
EXTRACT_KERNEL = 4
EXTRACT_STRIDE = 2
EXTRACT_PADDING = 1
ESTIMATE_KERNEL = 3
ESTIMATOR_BLOCKS = 2
HEAD_BIAS_STD = 1e-2


def is_power_of_two(value):
    return value > 0 and value & (value - 1) == 0


@dataclass(frozen=True)
class HyperNetConfig:
    S: int = DEFAULT_GRID
    patch_size: int = DEFAULT_PATCH
    channels: tuple = DEFAULT_CHANNELS
    mlp_layout: MlpLayout = field(default=DEFAULT_LAYOUT)
    slope: float = diffcore.DEFAULT_SLOPE
    estimator_blocks: int = ESTIMATOR_BLOCKS

    def __post_init__(self):
        if not is_power_of_two(self.S):
            raise ConfigurationError(f"Grid factor S must be a power of two, got {self.S}")
        if not is_power_of_two(self.patch_size):
            raise ConfigurationError(f"Patch size must be a power of two, got {self.patch_size}")
        if self.patch_size % self.S:
            raise ConfigurationError(f"Grid factor S={self.S} does not divide patch size {self.patch_size}")
        if len(self.channels) < self.n_downsampling:
            raise ConfigurationError(
                f"{self.n_downsampling} downsampling layers need {self.n_downsampling} channel widths, "
                f"got {len(self.channels)}"
            )
        if not self.channels or any(width < 1 for width in self.channels):
            raise ConfigurationError(f"Channel widths must be positive, got {self.channels}")
        if self.estimator_blocks < 1:
            raise ConfigurationError("The estimator needs at least one block")

    @property
    def n_downsampling(self):
        return int(math.log2(self.patch_size // self.S))

    @property
    def extractor_channels(self):
        return tuple(self.channels[:self.n_downsampling])

    @property
    def feature_channels(self):
        return self.extractor_channels[-1] if self.n_downsampling else RGB_CHANNELS

    @property
    def estimator_width(self):
        return self.extractor_channels[-1] if self.n_downsampling else self.channels[0]

    @property
    def per_cell_len(self):
        return self.mlp_layout.total

    @property
    def cell_size(self):
        return self.patch_size // self.S


@dataclass
class ParameterGrid:
    """Per-cell parameter vectors; row ``i * S + j`` of ``cells`` governs cell (i, j)."""

    S: int
    cells: Tensor
    per_cell_len: int

    def __post_init__(self):
        if self.cells.shape != (self.S * self.S, self.per_cell_len):
            raise LayoutError(
                f"Parameter grid of shape {self.cells.shape} does not hold {self.S}x{self.S} cells "
                f"of {self.per_cell_len} scalars"
            )

    def __len__(self):
        return self.S * self.S

    def cell(self, i, j, layout):
        return CellParams(diffcore.getitem(self.cells, i * self.S + j), layout)


def cell_slices(S, height, width):
    """Row/column slices of the pixel block each cell (i, j) governs."""
    if height % S or width % S:
        raise ConfigurationError(f"Image {height}x{width} is not divisible into {S}x{S} cells")
    cell_h, cell_w = height // S, width // S
    return {
        (i, j): (slice(i * cell_h, (i + 1) * cell_h), slice(j * cell_w, (j + 1) * cell_w))
        for i in range(S)
        for j in range(S)
    }


def coverage_map(S, height, width):
    counts = np.zeros((height, width), dtype=np.int64)
    for rows, cols in cell_slices(S, height, width).values():
        counts[rows, cols] += 1
    return counts


def weight_shapes(cfg):
    """Hypernetwork tensors in declaration order (the order checkpoints store them in)."""
    shapes = []
    c_in = RGB_CHANNELS
    for index, c_out in enumerate(cfg.extractor_channels):
        shapes.append((f"extract.{index}.kernel", (c_out, c_in, EXTRACT_KERNEL, EXTRACT_KERNEL)))
        shapes.append((f"extract.{index}.bias", (c_out,)))
        c_in = c_out
    features = cfg.feature_channels
    width = cfg.estimator_width
    for block in range(cfg.estimator_blocks):
        for branch in ("gamma", "beta"):
            shapes.append((f"estimate.{block}.{branch}.kernel", (c_in, features, ESTIMATE_KERNEL, ESTIMATE_KERNEL)))
            shapes.append((f"estimate.{block}.{branch}.bias", (c_in,)))
        shapes.append((f"estimate.{block}.conv.kernel", (width, c_in, ESTIMATE_KERNEL, ESTIMATE_KERNEL)))
        shapes.append((f"estimate.{block}.conv.bias", (width,)))
        c_in = width
    shapes.append(("head.kernel", (cfg.per_cell_len, width, 1, 1)))
    shapes.append(("head.bias", (cfg.per_cell_len,)))
    return shapes


def init_weights(cfg, rng, precision=Precision.STANDARD, head_std=0.0, head_bias_std=HEAD_BIAS_STD):
    """Fan-in scaled normal kernels, zero biases, near-zero head.

    The head kernel is zero unless ``head_std`` is set; its bias gets small Gaussian noise.
    """
    weights = {}
    for name, shape in weight_shapes(cfg):
        if name == "head.kernel":
            data = rng.normal(0.0, head_std, size=shape) if head_std else np.zeros(shape)
        elif name == "head.bias":
            data = rng.normal(0.0, head_bias_std, size=shape)
        elif name.endswith(".kernel"):
            fan_in = int(np.prod(shape[1:]))
            gain = 1.0 if (".gamma." in name or ".beta." in name) else 2.0
            data = rng.normal(0.0, math.sqrt(gain / fan_in), size=shape)
        else:
            data = np.zeros(shape)
        weights[name] = Tensor(data, requires_grad=True, precision=precision, name=name)
    logger.debug("Initialised %d hypernetwork tensors (%d scalars)", len(weights), count_parameters(weights))
    return weights


def count_parameters(weights):
    return sum(tensor.size for tensor in weights.values())


def check_weights(cfg, weights):
    expected = weight_shapes(cfg)
    actual = [(name, tuple(tensor.shape)) for name, tensor in weights.items()]
    if actual != expected:
        missing = {name for name, _ in expected} ^ {name for name, _ in actual}
        raise CompatibilityError(
            f"Hypernetwork weights do not match the configuration (differing tensors: {sorted(missing) or 'shapes'})"
        )


def _as_input(x, weights):
    precision = next(iter(weights.values())).precision
    if isinstance(x, Tensor):
        return x
    return Tensor(x, precision=precision)


def extract_features(x, cfg, weights):
    """Stride-2 convolutions with Leaky-ReLU, [3, P, P] -> [C, S, S]."""
    x = _as_input(x, weights)
    if x.shape != (RGB_CHANNELS, cfg.patch_size, cfg.patch_size):
        raise ConfigurationError(
            f"Hypernetwork expects a [3, {cfg.patch_size}, {cfg.patch_size}] patch, got {x.shape}"
        )
    h = x
    for index in range(cfg.n_downsampling):
        h = diffcore.conv2d_forward(
            h, weights[f"extract.{index}.kernel"], weights[f"extract.{index}.bias"],
            stride=EXTRACT_STRIDE, padding=EXTRACT_PADDING,
        )
        h = diffcore.leaky_relu(h, cfg.slope)
    return h


def _same_conv(x, weights, prefix):
    return diffcore.conv2d_forward(
        x, weights[f"{prefix}.kernel"], weights[f"{prefix}.bias"], stride=1, padding=ESTIMATE_KERNEL // 2
    )


def block_norm(h):
    """Instance norm; a lone grid position is normalised across its channels instead."""
    channels, height, width = h.shape
    if height * width > 1:
        return diffcore.instance_norm(h)
    return diffcore.reshape(diffcore.instance_norm(diffcore.reshape(h, (1, channels, 1))), h.shape)


def estimate_params(features, cfg, weights):
    """Estimator blocks (instance norm modulated by feature-driven scale/shift) and 1x1 head."""
    if features.ndim != 3 or features.shape[1:] != (cfg.S, cfg.S):
        raise DimensionError(f"Estimator expects features of spatial size {cfg.S}x{cfg.S}, got {features.shape}")
    h = features
    for block in range(cfg.estimator_blocks):
        gamma = _same_conv(features, weights, f"estimate.{block}.gamma")
        beta = _same_conv(features, weights, f"estimate.{block}.beta")
        modulated = diffcore.add(diffcore.mul(block_norm(h), diffcore.add(gamma, 1.0)), beta)
        h = diffcore.leaky_relu(_same_conv(modulated, weights, f"estimate.{block}.conv"), cfg.slope)
    out = diffcore.conv2d_forward(h, weights["head.kernel"], weights["head.bias"], stride=1, padding=0)
    cells = diffcore.reshape(out, (cfg.per_cell_len, cfg.S * cfg.S))
    return ParameterGrid(cfg.S, diffcore.transpose(cells, (1, 0)), cfg.per_cell_len)


def build_grid(x, cfg, weights):
    return estimate_params(extract_features(x, cfg, weights), cfg, weights)
