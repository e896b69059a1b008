"""Training checkpoints in the little-endian "INRC" layout.

::

    b"INRC" | u32 version
    u32 n | n bytes UTF-8 JSON config block (TrainConfig fields + "wavelengths")
    u32 epoch
    u32 tensor count
      per tensor: u16 name length | name | u8 ndim | ndim x u32 dims | f32 payload
    u64 Adam step count | f64 beta1 | f64 beta2 | f64 epsilon
      per tensor, same order: f32 m payload | f32 v payload
    u32 n | n bytes UTF-8 JSON RNG state

Tensors appear in hypernetwork declaration order. Files are written to a temporary sibling
and moved into place, so a crash never leaves a half-written checkpoint behind.
"""
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from inrhsi import hypernet
from inrhsi.config_store import TrainConfig
from inrhsi.diffcore import AdamState, Tensor
from inrhsi.errors import CompatibilityError, ConfigurationError, FormatError

logger = logging.getLogger(__name__)

MAGIC = b"INRC"
VERSION = 1


@dataclass
class Checkpoint:
    config: TrainConfig
    wavelengths: np.ndarray
    weights: dict
    opt_state: dict
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)


def _encode_json(data):
    payload = json.dumps(data, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(payload)) + payload


def _adam_hyper(opt_state):
    states = list(opt_state.values())
    if not states:
        return 0, 0.9, 0.999, 1e-8
    first = states[0]
    for state in states[1:]:
        if (state.step_count, state.beta1, state.beta2, state.epsilon) != (
            first.step_count, first.beta1, first.beta2, first.epsilon
        ):
            raise CompatibilityError("Adam states disagree on step count or hyperparameters")
    return first.step_count, first.beta1, first.beta2, first.epsilon


def encode_checkpoint(checkpoint):
    config_block = checkpoint.config.to_dict()
    config_block["wavelengths"] = [float(value) for value in np.asarray(checkpoint.wavelengths).reshape(-1)]
    parts = [MAGIC, struct.pack("<I", VERSION), _encode_json(config_block)]
    parts.append(struct.pack("<II", checkpoint.epoch, len(checkpoint.weights)))
    for name, tensor in checkpoint.weights.items():
        encoded_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded_name)) + encoded_name)
        parts.append(struct.pack("<B", tensor.ndim) + struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(np.asarray(tensor.data, dtype="<f4").tobytes())
    step_count, beta1, beta2, epsilon = _adam_hyper(checkpoint.opt_state)
    parts.append(struct.pack("<Qddd", step_count, beta1, beta2, epsilon))
    for name, tensor in checkpoint.weights.items():
        state = checkpoint.opt_state.get(name) or AdamState.fresh(tensor)
        parts.append(np.asarray(state.m, dtype="<f4").tobytes())
        parts.append(np.asarray(state.v, dtype="<f4").tobytes())
    parts.append(_encode_json(checkpoint.rng_state))
    return b"".join(parts)


def save_checkpoint(checkpoint, path):
    path = Path(path)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as file_handle:
        file_handle.write(encode_checkpoint(checkpoint))
    os.replace(tmp_path, path)
    logger.info("Saved checkpoint for epoch %d to %s", checkpoint.epoch, path)


class _Reader:
    """Cursor over the raw bytes; every failure reports the offset it stopped at."""

    def __init__(self, raw):
        self.raw = raw
        self.offset = 0

    def take(self, count, what):
        if self.offset + count > len(self.raw):
            raise FormatError(f"Truncated checkpoint while reading {what}", offset=self.offset)
        chunk = self.raw[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt, what):
        layout = struct.Struct(fmt)
        return layout.unpack(self.take(layout.size, what))

    def floats(self, shape, what):
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").reshape(shape).copy()

    def json(self, what):
        (length,) = self.unpack("<I", f"{what} length")
        start = self.offset
        try:
            return json.loads(self.take(length, what).decode("utf-8"))
        except ValueError as exc:
            raise FormatError(f"Malformed {what}: {exc}", offset=start) from exc


def decode_checkpoint(raw):
    reader = _Reader(raw)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"Bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"Unsupported checkpoint version {version}", offset=4)

    config_offset = reader.offset
    config_block = reader.json("config block")
    if not isinstance(config_block, dict):
        raise FormatError("Config block is not a JSON object", offset=config_offset)
    wavelengths = np.asarray(config_block.pop("wavelengths", []), dtype=np.float64)
    try:
        config = TrainConfig.from_dict(config_block).validate()
    except (ConfigurationError, TypeError) as exc:
        raise FormatError(f"Invalid config block: {exc}", offset=config_offset) from exc

    epoch, count = reader.unpack("<II", "epoch and tensor count")
    precision = config.precision_mode()
    weights = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<H", "tensor name length")
        name = reader.take(name_length, "tensor name").decode("utf-8", errors="replace")
        (ndim,) = reader.unpack("<B", f"rank of {name}")
        shape = reader.unpack(f"<{ndim}I", f"dims of {name}") if ndim else ()
        weights[name] = Tensor(reader.floats(shape, f"payload of {name}"), requires_grad=True,
                               precision=precision, name=name)

    step_count, beta1, beta2, epsilon = reader.unpack("<Qddd", "Adam hyperparameters")
    opt_state = {}
    for name, tensor in weights.items():
        m = reader.floats(tensor.shape, f"Adam first moment of {name}").astype(tensor.data.dtype)
        v = reader.floats(tensor.shape, f"Adam second moment of {name}").astype(tensor.data.dtype)
        opt_state[name] = AdamState(m=m, v=v, step_count=step_count, beta1=beta1, beta2=beta2, epsilon=epsilon)
    rng_state = reader.json("RNG state")
    if reader.offset != len(raw):
        raise FormatError(f"{len(raw) - reader.offset} trailing bytes after checkpoint", offset=reader.offset)

    hypernet.check_weights(config.hypernet_config(), weights)
    if wavelengths.size and wavelengths.size != config.bands:
        raise CompatibilityError(f"Checkpoint lists {wavelengths.size} wavelengths for {config.bands} bands")
    return Checkpoint(config, wavelengths, weights, opt_state, epoch, rng_state)


def load_checkpoint(path):
    with open(path, "rb") as file_handle:
        raw = file_handle.read()
    checkpoint = decode_checkpoint(raw)
    logger.info("Loaded checkpoint %s (epoch %d, %d tensors)", path, checkpoint.epoch, len(checkpoint.weights))
    return checkpoint
