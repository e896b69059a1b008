"""Periodic spatial encoding of normalised pixel coordinates.

For frequency index k the coordinate p = (x, y) contributes
``[cos(2^k pi x), sin(2^k pi x), cos(2^k pi y), sin(2^k pi y)]``; the blocks for
k = 0..N-1 are concatenated. With the encoding switched off the raw coordinates pass through.
"""
from dataclasses import dataclass

import numpy as np

from inrhsi.errors import ConfigurationError, EncodingDomainError

DEFAULT_N_FREQS = 5


@dataclass(frozen=True)
class EncodingConfig:
    n_freqs: int = DEFAULT_N_FREQS
    enabled: bool = True

    def __post_init__(self):
        if self.n_freqs < 0:
            raise ConfigurationError(f"Number of encoding frequencies must be non-negative, got {self.n_freqs}")

    @property
    def active(self):
        return self.enabled and self.n_freqs > 0

    @property
    def dim(self):
        return 4 * self.n_freqs if self.active else 2


def pixel_centers(width, height):
    """Normalised pixel-centre coordinates ``(col + 0.5) / W`` and ``(row + 0.5) / H``."""
    if width < 1 or height < 1:
        raise ConfigurationError(f"Grid dimensions must be positive, got {width}x{height}")
    xs = (np.arange(width, dtype=np.float64) + 0.5) / width
    ys = (np.arange(height, dtype=np.float64) + 0.5) / height
    return xs, ys


def _encode(xs, ys, cfg):
    if not cfg.active:
        return np.stack([xs, ys], axis=-1)
    freqs = (2.0 ** np.arange(cfg.n_freqs)) * np.pi
    ax = xs[..., None] * freqs
    ay = ys[..., None] * freqs
    blocks = np.stack([np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay)], axis=-1)
    return blocks.reshape(*xs.shape, 4 * cfg.n_freqs)


def encode_coord(p, cfg=EncodingConfig()):
    x, y = (float(value) for value in p)
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise EncodingDomainError(f"Coordinate {p} lies outside [0, 1]^2")
    return _encode(np.array([x]), np.array([y]), cfg)[0]


def encode_grid(width, height, cfg=EncodingConfig()):
    """Encoding of every pixel centre of a W x H grid, shaped [H, W, dim]."""
    xs, ys = pixel_centers(width, height)
    grid_x, grid_y = np.meshgrid(xs, ys)
    return _encode(grid_x, grid_y, cfg)
