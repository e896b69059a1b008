import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from inrhsi import diffcore
from inrhsi.cellmlp import DEFAULT_BANDS, DEFAULT_HIDDEN_WIDTH, MlpLayout
from inrhsi.diffcore import Precision
from inrhsi.encoding import DEFAULT_N_FREQS, EncodingConfig
from inrhsi.errors import ConfigurationError
from inrhsi.hypernet import DEFAULT_CHANNELS, DEFAULT_GRID, DEFAULT_PATCH, HEAD_BIAS_STD, HyperNetConfig

logger = logging.getLogger(__name__)

LOSSES = ("l1", "mse")
DEFAULT_TRAIN_CONFIG = {
    "lr0": 1e-4,
    "epochs": 1000,
    "decay_factor": 0.1,
    "decay_every": 200,
    "patch": DEFAULT_PATCH,
    "patches_per_image": None,
    "batch_size": 1,
    "seed": 0,
    "S": DEFAULT_GRID,
    "n_freqs": DEFAULT_N_FREQS,
    "encoding_enabled": True,
    "hidden_width": DEFAULT_HIDDEN_WIDTH,
    "bands": DEFAULT_BANDS,
    "channels": list(DEFAULT_CHANNELS),
    "slope": diffcore.DEFAULT_SLOPE,
    "activation": "leaky_relu",
    "output_activation": "sigmoid",
    "loss": "l1",
    "head_bias_std": HEAD_BIAS_STD,
    "precision": Precision.STANDARD.value,
    "checkpoint_every": 1,
}
TRAIN_CONFIG_KEYS = set(DEFAULT_TRAIN_CONFIG)
PATCH_BUDGET = 1000


@dataclass
class TrainConfig:
    """Every knob of a training run; the checkpoint config block stores exactly these fields."""

    lr0: float = 1e-4
    epochs: int = 1000
    decay_factor: float = 0.1
    decay_every: int = 200
    patch: int = DEFAULT_PATCH
    patches_per_image: int = None
    batch_size: int = 1
    seed: int = 0
    S: int = DEFAULT_GRID
    n_freqs: int = DEFAULT_N_FREQS
    encoding_enabled: bool = True
    hidden_width: int = DEFAULT_HIDDEN_WIDTH
    bands: int = DEFAULT_BANDS
    channels: tuple = DEFAULT_CHANNELS
    slope: float = diffcore.DEFAULT_SLOPE
    activation: str = "leaky_relu"
    output_activation: str = "sigmoid"
    loss: str = "l1"
    head_bias_std: float = HEAD_BIAS_STD
    precision: str = Precision.STANDARD.value
    checkpoint_every: int = 1

    def __post_init__(self):
        self.channels = tuple(int(width) for width in self.channels)
        self.precision = Precision.parse(self.precision).value

    def validate(self):
        if self.lr0 <= 0:
            raise ConfigurationError(f"Learning rate must be positive, got {self.lr0}")
        if self.epochs < 1:
            raise ConfigurationError(f"Epoch count must be positive, got {self.epochs}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigurationError(f"Decay factor must lie in (0, 1], got {self.decay_factor}")
        if self.decay_every < 1:
            raise ConfigurationError(f"Decay interval must be positive, got {self.decay_every}")
        if self.batch_size < 1:
            raise ConfigurationError(f"Batch size must be positive, got {self.batch_size}")
        if self.patches_per_image is not None and self.patches_per_image < 1:
            raise ConfigurationError(f"patches_per_image must be positive, got {self.patches_per_image}")
        if self.checkpoint_every < 1:
            raise ConfigurationError(f"checkpoint_every must be positive, got {self.checkpoint_every}")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"Unknown loss {self.loss!r}, expected one of {LOSSES}")
        if self.head_bias_std < 0:
            raise ConfigurationError("Head bias noise must be non-negative")
        if self.patch % self.S:
            raise ConfigurationError(f"Patch size {self.patch} is not divisible by grid factor S={self.S}")
        # architecture checks live in the component configs
        self.hypernet_config()
        return self

    def encoding_config(self):
        return EncodingConfig(n_freqs=self.n_freqs, enabled=self.encoding_enabled)

    def mlp_layout(self):
        return MlpLayout.for_encoding(
            self.encoding_config(),
            hidden_width=self.hidden_width,
            out_dim=self.bands,
            activation=self.activation,
            output_activation=self.output_activation,
            slope=self.slope,
        )

    def hypernet_config(self):
        return HyperNetConfig(
            S=self.S,
            patch_size=self.patch,
            channels=self.channels,
            mlp_layout=self.mlp_layout(),
            slope=self.slope,
        )

    def precision_mode(self):
        return Precision.parse(self.precision)

    def patch_count(self, n_images):
        """Patches drawn per image; by default the whole set totals PATCH_BUDGET."""
        if self.patches_per_image is not None:
            return self.patches_per_image
        return max(1, PATCH_BUDGET // max(1, n_images))

    def to_dict(self):
        data = asdict(self)
        data["channels"] = list(self.channels)
        return data

    @classmethod
    def from_dict(cls, data):
        known = {item.name for item in fields(cls)}
        return cls(**{key: value for key, value in data.items() if key in known})


def _read_config_file(config_path):
    if config_path is None or not Path(config_path).exists():
        return {}
    try:
        with open(config_path, "r", encoding="utf-8") as file_handle:
            data = json.load(file_handle)
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"Could not read training config {config_path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"Training config {config_path} must hold a JSON object")
    return data


def _write_config_file(config, config_path):
    with open(config_path, "w", encoding="utf-8") as file_handle:
        json.dump(config, file_handle, indent=2)


def load_train_config(config_path=None, overrides=None):
    """Defaults, then the JSON file, then explicit overrides (None values are skipped)."""
    config = dict(DEFAULT_TRAIN_CONFIG)
    file_config = _read_config_file(config_path)
    ignored = sorted(set(file_config) - TRAIN_CONFIG_KEYS)
    if ignored:
        logger.warning("Ignoring unknown training config keys: %s", ", ".join(ignored))
    config.update({key: value for key, value in file_config.items() if key in TRAIN_CONFIG_KEYS})
    for key, value in (overrides or {}).items():
        if key in TRAIN_CONFIG_KEYS and value is not None:
            config[key] = value
    return TrainConfig.from_dict(config).validate()


def save_train_config(config, config_path):
    data = config.to_dict() if isinstance(config, TrainConfig) else dict(config)
    persisted = {key: value for key, value in data.items() if key in TRAIN_CONFIG_KEYS}
    _write_config_file(persisted, config_path)
