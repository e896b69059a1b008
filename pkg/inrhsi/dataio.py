"""Hyperspectral cubes: container format, synthetic scenes, RGB projection and dataset splits.

HSRC container, little-endian throughout::

    b"HSRC" | u32 version | u32 W | u32 H | u32 L | L x f32 wavelengths | L*H*W x f32 samples

Samples are band-sequential (band, row, column). RGB inputs are accepted either as an HSRC
file with L = 3 (bands B, G, R in increasing wavelength) or as any 8-bit image Pillow reads,
such as a P6 pixmap, divided by 255.

The continuous imaging model integrates radiance against each channel's response over the
wavelength range; ``project_rgb`` is its discretisation on the cube's sampled wavelengths.
"""
import io
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from inrhsi.errors import DimensionError, FormatError, InputError

logger = logging.getLogger(__name__)

HSRC_MAGIC = b"HSRC"
HSRC_VERSION = 1
HSRC_HEADER = struct.Struct("<4sIIII")
WAVELENGTH_MIN = 400.0
WAVELENGTH_MAX = 700.0
DEFAULT_RESPONSE_CENTERS = (620.0, 550.0, 450.0)
DEFAULT_RESPONSE_SIGMA = 40.0
DEFAULT_FRACTIONS = (0.6, 0.2, 0.2)
SMOOTHNESS_BOUND = 0.05
EIGHT_BIT_MODES = ("1", "L", "LA", "P", "RGB", "RGBA")


@dataclass
class HsiCube:
    """Band-sequential cube ``data[L, H, W]`` with values in [0, 1], stored as float32."""

    wavelengths: np.ndarray
    data: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.wavelengths = np.asarray(self.wavelengths, dtype=np.float32)
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[0] < 1:
            raise InputError(f"Cube data must be [L, H, W] with L >= 1, got {self.data.shape}")
        if self.wavelengths.shape != (self.data.shape[0],):
            raise InputError(f"{self.wavelengths.size} wavelengths for {self.data.shape[0]} bands")
        if np.any(np.diff(self.wavelengths) <= 0):
            raise InputError("Wavelengths must be strictly increasing")
        if not np.all(np.isfinite(self.data)) or self.data.min() < 0.0 or self.data.max() > 1.0:
            raise InputError("Cube values must be finite and lie in [0, 1]")

    @property
    def bands(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]


@dataclass
class SpectralResponse:
    """Per-channel weights ``weights[3, L]`` (R, G, B rows); non-negative, each row sums to 1."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] != 3:
            raise InputError(f"Spectral response must be [3, L], got {self.weights.shape}")
        if np.any(self.weights < 0):
            raise InputError("Spectral response weights must be non-negative")
        if not np.allclose(self.weights.sum(axis=1), 1.0, rtol=0.0, atol=1e-9):
            raise InputError("Each spectral response channel must sum to 1")

    @property
    def bands(self):
        return self.weights.shape[1]


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    fractions: tuple = DEFAULT_FRACTIONS


def default_wavelengths(bands):
    if bands == 1:
        return np.array([(WAVELENGTH_MIN + WAVELENGTH_MAX) / 2.0])
    return np.linspace(WAVELENGTH_MIN, WAVELENGTH_MAX, bands)


def gaussian_response(wavelengths, centers=DEFAULT_RESPONSE_CENTERS, sigma=DEFAULT_RESPONSE_SIGMA):
    """Synthetic camera response: one Gaussian bump per channel, normalised to unit sum."""
    wavelengths = np.asarray(wavelengths, dtype=np.float64)
    bumps = np.exp(-0.5 * ((wavelengths[None, :] - np.asarray(centers)[:, None]) / sigma) ** 2)
    return SpectralResponse(bumps / bumps.sum(axis=1, keepdims=True))


def project_rgb(cube, response):
    """X_c(p) = sum_n R(p, lambda_n) * Phi_c(lambda_n), accumulated band by band -> [3, H, W]."""
    data = cube.data if isinstance(cube, HsiCube) else np.asarray(cube)
    if data.ndim != 3 or data.shape[0] != response.bands:
        raise DimensionError(f"Response covers {response.bands} bands, cube has shape {data.shape}")
    rgb = np.zeros((3,) + data.shape[1:], dtype=np.float64)
    for band in range(data.shape[0]):
        rgb += response.weights[:, band, None, None] * data[band].astype(np.float64)[None]
    return rgb


def crop(cube, top, left, size):
    return HsiCube(cube.wavelengths, cube.data[:, top:top + size, left:left + size])


# synthetic scenes


def _spectral_bases(rng, wavelengths, count):
    bases = np.empty((count, wavelengths.size))
    for index in range(count):
        curve = np.full(wavelengths.size, rng.uniform(0.0, 0.15))
        for _ in range(rng.integers(1, 3)):
            center = rng.uniform(380.0, 720.0)
            width = rng.uniform(50.0, 90.0)
            curve += rng.uniform(0.3, 1.0) * np.exp(-0.5 * ((wavelengths - center) / width) ** 2)
        bases[index] = curve / curve.max()
    return bases


def _spatial_patterns(rng, width, height, high_frequency):
    ys, xs = np.meshgrid((np.arange(height) + 0.5) / height, (np.arange(width) + 0.5) / width, indexing="ij")
    angle = rng.uniform(0.0, 2.0 * np.pi)
    gradient = 0.5 + 0.5 * (np.cos(angle) * (xs - 0.5) + np.sin(angle) * (ys - 0.5)) * 1.4

    periods = (2, 3, 4) if high_frequency else (4, 8, 16)
    period = int(rng.choice(periods))
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    checker = ((rows // period + cols // period) % 2).astype(np.float64)

    disks = np.zeros((height, width))
    for _ in range(3):
        cy, cx = rng.uniform(0.0, 1.0, size=2)
        radius = rng.uniform(0.1, 0.35)
        disks = np.maximum(disks, ((xs - cx) ** 2 + (ys - cy) ** 2 <= radius ** 2).astype(np.float64))

    cycles = rng.uniform(6.0, 12.0) if high_frequency else rng.uniform(1.0, 4.0)
    grating = 0.5 + 0.5 * np.sin(2.0 * np.pi * cycles * (xs + ys) / 2.0 + rng.uniform(0.0, 2.0 * np.pi))
    return np.clip(np.stack([gradient, checker, disks, grating]), 0.0, 1.0)


def synth_scene(width, height, bands, seed, high_frequency=False):
    """Deterministic scene of smooth spectra mixed by gradients, checkerboards, disks and gratings."""
    if width < 1 or height < 1 or bands < 1:
        raise InputError(f"Scene dimensions must be positive, got {width}x{height}x{bands}")
    rng = np.random.default_rng(seed)
    wavelengths = default_wavelengths(bands)
    patterns = _spatial_patterns(rng, width, height, high_frequency)
    bases = _spectral_bases(rng, wavelengths, patterns.shape[0])
    abundance = patterns + 0.05
    abundance /= abundance.sum(axis=0, keepdims=True)
    brightness = rng.uniform(0.6, 0.95)
    data = brightness * np.einsum("khw,kl->lhw", abundance, bases)
    logger.debug("Synthesised %dx%dx%d scene (seed %s, high_frequency=%s)", width, height, bands, seed, high_frequency)
    return HsiCube(wavelengths, np.clip(data, 0.0, 1.0))


def spectral_roughness(cube):
    """Mean absolute second difference along the band axis."""
    data = cube.data.astype(np.float64) if isinstance(cube, HsiCube) else np.asarray(cube, dtype=np.float64)
    if data.shape[0] < 3:
        return 0.0
    return float(np.abs(np.diff(data, n=2, axis=0)).mean())


# dataset splits


def split_dataset(scenes, fractions=DEFAULT_FRACTIONS, seed=0):
    scenes = list(scenes)
    if not scenes:
        raise InputError("Cannot split an empty scene list")
    if len(fractions) != 3 or any(value < 0 for value in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InputError(f"Split fractions must be three non-negative values summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(scenes))
    n_train = int(round(fractions[0] * len(scenes)))
    n_val = min(int(round(fractions[1] * len(scenes))), len(scenes) - n_train)
    shuffled = [scenes[index] for index in order]
    return DatasetSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
        fractions=tuple(fractions),
    )


# container I/O


def _write_atomic(path, payload):
    path = Path(path)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as file_handle:
        file_handle.write(payload)
    os.replace(tmp_path, path)


def save_cube(cube, path):
    header = HSRC_HEADER.pack(HSRC_MAGIC, HSRC_VERSION, cube.width, cube.height, cube.bands)
    payload = header + cube.wavelengths.astype("<f4").tobytes() + cube.data.astype("<f4").tobytes()
    _write_atomic(path, payload)
    logger.info("Wrote %dx%dx%d cube to %s", cube.width, cube.height, cube.bands, path)


def _parse_cube(raw):
    if len(raw) < HSRC_HEADER.size:
        raise FormatError(f"File too short for an HSRC header ({len(raw)} bytes)", offset=len(raw))
    magic, version, width, height, bands = HSRC_HEADER.unpack_from(raw, 0)
    if magic != HSRC_MAGIC:
        raise FormatError(f"Bad magic {magic!r}, expected {HSRC_MAGIC!r}", offset=0)
    if version != HSRC_VERSION:
        raise FormatError(f"Unsupported HSRC version {version}", offset=4)
    if width < 1 or height < 1 or bands < 1:
        raise FormatError(f"Invalid dimensions {width}x{height}x{bands}", offset=8)
    offset = HSRC_HEADER.size
    expected = offset + 4 * bands + 4 * bands * height * width
    if len(raw) < expected:
        raise FormatError(f"Truncated HSRC payload: {len(raw)} of {expected} bytes", offset=len(raw))
    if len(raw) > expected:
        raise FormatError(f"{len(raw) - expected} trailing bytes after HSRC payload", offset=expected)
    wavelengths = np.frombuffer(raw, dtype="<f4", count=bands, offset=offset)
    samples = np.frombuffer(raw, dtype="<f4", count=bands * height * width, offset=offset + 4 * bands)
    try:
        return HsiCube(wavelengths.astype(np.float32), samples.reshape(bands, height, width).astype(np.float32))
    except InputError as exc:
        raise FormatError(f"Invalid HSRC content: {exc}", offset=offset) from exc


def load_cube(path):
    with open(path, "rb") as file_handle:
        raw = file_handle.read()
    return _parse_cube(raw)


def load_image(path):
    """8-bit image file (P6 pixmap, PNG, ...) as RGB [3, H, W] in [0, 1]."""
    try:
        image = Image.open(path)
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path} is neither an HSRC container nor a readable image", offset=0) from exc
    with image:
        if image.mode not in EIGHT_BIT_MODES:
            raise FormatError(f"Only 8-bit images are supported, {path} has mode {image.mode}", offset=0)
        try:
            pixels = np.asarray(image.convert("RGB"))
        except OSError as exc:
            raise FormatError(f"Unreadable image data in {path}: {exc}", offset=0) from exc
    return np.transpose(pixels, (2, 0, 1)).astype(np.float64) / 255.0


def save_ppm(rgb, path):
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise DimensionError(f"RGB image must be [3, H, W], got {rgb.shape}")
    pixels = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(np.transpose(pixels, (1, 2, 0)))).save(buffer, format="PPM")
    _write_atomic(path, buffer.getvalue())


def load_rgb(path):
    """RGB image [3, H, W] from an HSRC file with three bands or an 8-bit image file.

    HSRC bands run in increasing wavelength (B, G, R) and are returned as R, G, B.
    """
    with open(path, "rb") as file_handle:
        head = file_handle.read(4)
    if head == HSRC_MAGIC:
        cube = load_cube(path)
        if cube.bands != 3:
            raise DimensionError(f"RGB container {path} has {cube.bands} bands, expected 3")
        return cube.data[::-1].astype(np.float64)
    return load_image(path)


def save_rgb(rgb, path):
    """Store R, G, B rows as a B, G, R HSRC container labelled with the response centres."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise DimensionError(f"RGB image must be [3, H, W], got {rgb.shape}")
    save_cube(HsiCube(np.array(DEFAULT_RESPONSE_CENTERS[::-1]), np.clip(rgb[::-1], 0.0, 1.0)), path)
