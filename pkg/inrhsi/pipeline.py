"""End-to-end model, training loop and full-image reconstruction.

A forward pass runs the hypernetwork on the RGB patch, turns its output into an S x S grid of
cell parameters and evaluates each cell's MLP on the pixels it covers, fed with the pixel's RGB
value and the encoding of its coordinates within the patch.
"""
import functools
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from inrhsi import checkpoint as checkpoint_io
from inrhsi import diffcore, hypernet
from inrhsi.cellmlp import RGB_CHANNELS, batched_mlp_forward, evaluate_patch, pixel_inputs
from inrhsi.dataio import HsiCube, default_wavelengths
from inrhsi.diffcore import AdamState, Precision, Tensor
from inrhsi.encoding import encode_grid
from inrhsi.errors import (
    CompatibilityError,
    ConfigurationError,
    DimensionError,
    LayoutError,
    NumericError,
    SampleSizeError,
)

logger = logging.getLogger(__name__)

ARCHITECTURE_FIELDS = (
    "patch", "S", "n_freqs", "encoding_enabled", "hidden_width", "bands", "channels",
    "slope", "activation", "output_activation", "precision",
)


@dataclass
class TrainResult:
    weights: dict
    opt_state: dict
    losses: list
    epoch: int
    checkpoint_path: Path = None
    elapsed: float = 0.0


@dataclass
class FitResult:
    weights: dict
    losses: list
    steps: int
    elapsed: float = 0.0


@dataclass
class CellCanvas:
    """Collects per-cell outputs and stitches them; every pixel must be written exactly once."""

    S: int
    cell_height: int
    cell_width: int
    bands: int
    cells: dict = field(default_factory=dict)
    coverage: np.ndarray = None

    def __post_init__(self):
        self.coverage = np.zeros((self.S * self.cell_height, self.S * self.cell_width), dtype=np.int64)

    def write(self, i, j, spectra):
        if spectra.shape != (self.bands, self.cell_height, self.cell_width):
            raise LayoutError(f"Cell ({i}, {j}) output has shape {spectra.shape}")
        rows = slice(i * self.cell_height, (i + 1) * self.cell_height)
        cols = slice(j * self.cell_width, (j + 1) * self.cell_width)
        self.coverage[rows, cols] += 1
        if self.coverage[rows, cols].max() > 1:
            raise LayoutError(f"Cell ({i}, {j}) overwrites pixels that were already stitched")
        self.cells[(i, j)] = spectra

    def assemble(self):
        if np.any(self.coverage != 1):
            raise LayoutError(f"{int(np.count_nonzero(self.coverage == 0))} pixels were never written")
        rows = [diffcore.concat([self.cells[(i, j)] for j in range(self.S)], axis=2) for i in range(self.S)]
        return diffcore.concat(rows, axis=1)


# model


@functools.lru_cache(maxsize=16)
def _cached_encoding(patch, encoding):
    grid = encode_grid(patch, patch, encoding)
    grid.setflags(write=False)
    return grid


def patch_encoding(cfg):
    return _cached_encoding(cfg.patch, cfg.encoding_config())


def _weights_precision(weights):
    return next(iter(weights.values())).precision


def _patch_input(x, cfg, weights):
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.shape != (RGB_CHANNELS, cfg.patch, cfg.patch):
        raise ConfigurationError(f"Model expects a [3, {cfg.patch}, {cfg.patch}] patch, got {data.shape}")
    return Tensor(data, precision=_weights_precision(weights))


def forward_full(x, weights, cfg, enc=None):
    """Spectra [L, P, P] for an RGB patch [3, P, P], all cells evaluated in one batched pass."""
    hcfg = cfg.hypernet_config()
    x = _patch_input(x, cfg, weights)
    enc = patch_encoding(cfg) if enc is None else enc
    grid = hypernet.build_grid(x, hcfg, weights)
    layout = hcfg.mlp_layout
    S, cell, patch = cfg.S, hcfg.cell_size, cfg.patch

    inputs = pixel_inputs(x.data, enc)
    inputs = inputs.reshape(S, cell, S, cell, layout.in_dim).transpose(0, 2, 1, 3, 4)
    inputs = Tensor(inputs.reshape(S * S, cell * cell, layout.in_dim), precision=x.precision)
    spectra = batched_mlp_forward(inputs, grid.cells, layout)
    spectra = diffcore.reshape(spectra, (S, S, cell, cell, layout.out_dim))
    spectra = diffcore.transpose(spectra, (4, 0, 2, 1, 3))
    return diffcore.reshape(spectra, (layout.out_dim, patch, patch))


def forward_staged(x, weights, cfg, enc=None):
    """Same mapping as forward_full, one cell at a time through an explicit canvas."""
    hcfg = cfg.hypernet_config()
    x = _patch_input(x, cfg, weights)
    enc = patch_encoding(cfg) if enc is None else enc
    grid = hypernet.build_grid(x, hcfg, weights)
    canvas = CellCanvas(cfg.S, hcfg.cell_size, hcfg.cell_size, cfg.bands)
    for (i, j), (rows, cols) in hypernet.cell_slices(cfg.S, cfg.patch, cfg.patch).items():
        cell_params = grid.cell(i, j, hcfg.mlp_layout)
        canvas.write(i, j, evaluate_patch(x.data[:, rows, cols], enc[rows, cols], cell_params))
    return canvas.assemble()


def _loss_fn(cfg):
    return diffcore.mse_loss if cfg.loss == "mse" else diffcore.l1_loss


def model_loss(batch, weights, cfg, enc=None):
    """Mean over the batch of the per-patch loss (itself a mean over pixels and bands)."""
    if not batch:
        raise SampleSizeError("Cannot compute a loss over an empty batch")
    loss_fn = _loss_fn(cfg)
    total = None
    for x, y in batch:
        y = y.data if isinstance(y, Tensor) else np.asarray(y)
        if y.shape != (cfg.bands, cfg.patch, cfg.patch):
            raise DimensionError(f"Target patch has shape {y.shape}, expected ({cfg.bands}, {cfg.patch}, {cfg.patch})")
        term = loss_fn(forward_full(x, weights, cfg, enc), y)
        total = term if total is None else diffcore.add(total, term)
    return diffcore.scale(total, 1.0 / len(batch))


# optimisation


def lr_schedule(epoch, cfg):
    if not 0 <= epoch < cfg.epochs:
        raise ConfigurationError(f"Epoch {epoch} outside the schedule [0, {cfg.epochs})")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


def init_optimizer(weights):
    return {name: AdamState.fresh(tensor) for name, tensor in weights.items()}


def training_step(batch, weights, opt_state, cfg, lr=None, enc=None):
    """One Adam update on the batch loss; returns the loss before the update."""
    lr = cfg.lr0 if lr is None else lr
    for tensor in weights.values():
        tensor.zero_grad()
    loss = model_loss(batch, weights, cfg, enc)
    loss.backward()
    for name, tensor in weights.items():
        diffcore.adam_step(tensor, tensor.grad, opt_state[name], lr)
    return loss.item()


def flat_objective(weights, batch, cfg):
    """The batch loss as a function of one flat vector holding every weight, plus that vector."""
    names = list(weights)
    shapes = [weights[name].shape for name in names]
    theta = Tensor(
        np.concatenate([weights[name].data.reshape(-1) for name in names]),
        precision=Precision.VERIFICATION,
    )
    enc = patch_encoding(cfg)

    def objective(flat):
        rebuilt = {}
        cursor = 0
        for name, shape in zip(names, shapes):
            size = int(np.prod(shape))
            rebuilt[name] = diffcore.reshape(diffcore.getitem(flat, slice(cursor, cursor + size)), shape)
            cursor += size
        return model_loss(batch, rebuilt, cfg, enc)

    return objective, theta


# data


def sample_patches(cube, rgb, count, patch, rng):
    """``count`` aligned (rgb, cube) crops at uniformly random top-left corners.

    Crops are views into the source arrays.
    """
    data = cube.data if isinstance(cube, HsiCube) else np.asarray(cube)
    rgb = np.asarray(rgb)
    height, width = data.shape[1:]
    if rgb.shape != (RGB_CHANNELS, height, width):
        raise DimensionError(f"RGB image {rgb.shape} is not aligned with cube {data.shape}")
    if height < patch or width < patch:
        raise SampleSizeError(f"Cube of {height}x{width} pixels is smaller than the {patch}x{patch} patch")
    if count < 1:
        raise SampleSizeError(f"Patch count must be positive, got {count}")
    tops = rng.integers(0, height - patch + 1, size=count)
    lefts = rng.integers(0, width - patch + 1, size=count)
    return [
        (rgb[:, top:top + patch, left:left + patch], data[:, top:top + patch, left:left + patch])
        for top, left in zip(tops, lefts)
    ]


def _scene_patches(cfg, scenes, rng):
    per_image = cfg.patch_count(len(scenes))
    patches = []
    for cube, rgb in scenes:
        if cube.bands != cfg.bands:
            raise ConfigurationError(f"Scene has {cube.bands} bands, model is configured for {cfg.bands}")
        patches.extend(sample_patches(cube, rgb, per_image, cfg.patch, rng))
    return patches


def _rng_streams(seed):
    init_seq, sample_seq, shuffle_seq = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init_seq), np.random.default_rng(sample_seq), np.random.default_rng(shuffle_seq)


def check_compatible(cfg, saved_cfg):
    differing = [name for name in ARCHITECTURE_FIELDS if getattr(cfg, name) != getattr(saved_cfg, name)]
    if differing:
        raise CompatibilityError(f"Checkpoint was trained with a different {', '.join(differing)}")


# training


def train(cfg, scenes, checkpoint_path=None, log_path=None, resume_from=None, wavelengths=None):
    """Epoch loop over a fixed sampled patch list, shuffled every epoch.

    A checkpoint is written every ``checkpoint_every`` epochs and after the last one. When a
    non-finite value shows up the error propagates and the last checkpoint on disk is left as is.
    """
    cfg.validate()
    if not scenes:
        raise SampleSizeError("Training needs at least one scene")
    hcfg = cfg.hypernet_config()
    init_rng, sample_rng, shuffle_rng = _rng_streams(cfg.seed)
    patches = _scene_patches(cfg, scenes, sample_rng)
    if wavelengths is None:
        wavelengths = scenes[0][0].wavelengths

    if resume_from is not None:
        saved = resume_from if isinstance(resume_from, checkpoint_io.Checkpoint) else checkpoint_io.load_checkpoint(resume_from)
        check_compatible(cfg, saved.config)
        weights, opt_state, start = saved.weights, saved.opt_state, saved.epoch
        if "shuffle" in saved.rng_state:
            shuffle_rng.bit_generator.state = saved.rng_state["shuffle"]
        logger.info("Resuming from epoch %d", start)
    else:
        weights = hypernet.init_weights(hcfg, init_rng, cfg.precision_mode(), head_bias_std=cfg.head_bias_std)
        opt_state = init_optimizer(weights)
        start = 0
    logger.info(
        "Training %d hypernetwork parameters on %d patches (S=%d, patch=%d, %d epochs)",
        hypernet.count_parameters(weights), len(patches), cfg.S, cfg.patch, cfg.epochs,
    )

    enc = patch_encoding(cfg)
    losses = []
    started = time.monotonic()
    log_handle = open(log_path, "a" if resume_from is not None else "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(start, cfg.epochs):
            lr = lr_schedule(epoch, cfg)
            order = shuffle_rng.permutation(len(patches))
            epoch_losses = []
            try:
                for begin in range(0, len(order), cfg.batch_size):
                    batch = [patches[index] for index in order[begin:begin + cfg.batch_size]]
                    epoch_losses.append(training_step(batch, weights, opt_state, cfg, lr, enc))
            except NumericError:
                logger.error("Training diverged in epoch %d; keeping last checkpoint %s", epoch + 1, checkpoint_path)
                raise
            mean_loss = float(np.mean(epoch_losses))
            losses.append(mean_loss)
            line = f"epoch={epoch + 1} lr={lr:.6e} loss={mean_loss:.9e}"
            logger.info(line)
            if log_handle:
                log_handle.write(line + "\n")
                log_handle.flush()
            done = epoch + 1
            if checkpoint_path and (done % cfg.checkpoint_every == 0 or done == cfg.epochs):
                checkpoint_io.save_checkpoint(
                    checkpoint_io.Checkpoint(
                        cfg, np.asarray(wavelengths), weights, opt_state, done,
                        {"shuffle": shuffle_rng.bit_generator.state},
                    ),
                    checkpoint_path,
                )
    finally:
        if log_handle:
            log_handle.close()
    return TrainResult(weights, opt_state, losses, max(start, cfg.epochs), checkpoint_path, time.monotonic() - started)


def fit_scene(cfg, cube, rgb, steps, lr=None):
    """Fixed budget of constant-rate steps on patches drawn from one scene."""
    cfg.validate()
    hcfg = cfg.hypernet_config()
    init_rng, sample_rng, shuffle_rng = _rng_streams(cfg.seed)
    patches = _scene_patches(cfg, [(cube, rgb)], sample_rng)
    weights = hypernet.init_weights(hcfg, init_rng, cfg.precision_mode(), head_bias_std=cfg.head_bias_std)
    opt_state = init_optimizer(weights)
    enc = patch_encoding(cfg)
    losses = []
    order, cursor = shuffle_rng.permutation(len(patches)), 0
    started = time.monotonic()
    for step in range(steps):
        if cursor >= len(order):
            order, cursor = shuffle_rng.permutation(len(patches)), 0
        batch = [patches[index] for index in order[cursor:cursor + cfg.batch_size]]
        cursor += cfg.batch_size
        losses.append(training_step(batch, weights, opt_state, cfg, lr, enc))
        if (step + 1) % 500 == 0:
            logger.info("fit step %d/%d loss=%.6e", step + 1, steps, losses[-1])
    return FitResult(weights, losses, steps, time.monotonic() - started)


# inference


def _pad_mode(height, width):
    return "reflect" if min(height, width) > 1 else "edge"


def reconstruct(rgb, checkpoint, workers=1):
    """Cube for a whole RGB image, tiled into non-overlapping patch-size tiles.

    Images whose sides are not multiples of the patch size are reflect-padded on the bottom and
    right, then the output is cropped back. Seam positions are recorded in the cube metadata.
    """
    cfg = checkpoint.config
    hypernet.check_weights(cfg.hypernet_config(), checkpoint.weights)
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != RGB_CHANNELS:
        raise DimensionError(f"RGB image must be [3, H, W], got {rgb.shape}")
    height, width = rgb.shape[1:]
    patch = cfg.patch
    pad_h, pad_w = (-height) % patch, (-width) % patch
    if pad_h or pad_w:
        rgb = np.pad(rgb, ((0, 0), (0, pad_h), (0, pad_w)), mode=_pad_mode(height, width))
    padded_h, padded_w = rgb.shape[1:]

    frozen = {name: tensor.detach() for name, tensor in checkpoint.weights.items()}
    enc = patch_encoding(cfg)
    corners = [(top, left) for top in range(0, padded_h, patch) for left in range(0, padded_w, patch)]

    def run_tile(corner):
        top, left = corner
        return forward_full(rgb[:, top:top + patch, left:left + patch], frozen, cfg, enc).data

    if workers > 1 and len(corners) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            tiles = list(pool.map(run_tile, corners))
    else:
        tiles = [run_tile(corner) for corner in corners]

    out = np.empty((cfg.bands, padded_h, padded_w), dtype=np.float32)
    for (top, left), tile in zip(corners, tiles):
        out[:, top:top + patch, left:left + patch] = tile
    logger.info("Reconstructed %dx%d image from %d tiles (padding %d, %d)", width, height, len(corners), pad_h, pad_w)

    wavelengths = checkpoint.wavelengths
    if np.asarray(wavelengths).size != cfg.bands:
        wavelengths = default_wavelengths(cfg.bands)
    metadata = {
        "tiles": len(corners),
        "padded_shape": [int(padded_h), int(padded_w)],
        "padding": [int(pad_h), int(pad_w)],
        "seams": {
            "rows": list(range(patch, padded_h, patch)),
            "cols": list(range(patch, padded_w, patch)),
        },
    }
    return HsiCube(wavelengths, np.clip(out[:, :height, :width], 0.0, 1.0), metadata)
