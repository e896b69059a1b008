import json
import tempfile
import unittest
from pathlib import Path

from inrhsi.config_store import TrainConfig, load_train_config, save_train_config
from inrhsi.errors import ConfigurationError


class TrainConfigTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = Path(self.tmp.name) / "train_config.json"

    def test_defaults(self):
        cfg = load_train_config()
        self.assertEqual(1e-4, cfg.lr0)
        self.assertEqual(1000, cfg.epochs)
        self.assertEqual((16, 64, 5), (cfg.S, cfg.patch, cfg.n_freqs))
        self.assertEqual(20191, cfg.mlp_layout().total)

    def test_file_then_overrides(self):
        self.path.write_text(json.dumps({"epochs": 20, "S": 8, "seed": 4}), encoding="utf-8")
        cfg = load_train_config(self.path, {"epochs": 5, "seed": None})
        self.assertEqual(5, cfg.epochs)
        self.assertEqual(8, cfg.S)
        self.assertEqual(4, cfg.seed)

    def test_unknown_keys_ignored(self):
        self.path.write_text(json.dumps({"epochs": 3, "colour": "red"}), encoding="utf-8")
        with self.assertLogs("inrhsi.config_store", level="WARNING"):
            cfg = load_train_config(self.path)
        self.assertEqual(3, cfg.epochs)

    def test_malformed_file(self):
        self.path.write_text("{not json", encoding="utf-8")
        with self.assertRaises(ConfigurationError):
            load_train_config(self.path)
        self.path.write_text("[1, 2]", encoding="utf-8")
        with self.assertRaises(ConfigurationError):
            load_train_config(self.path)

    def test_invalid_values(self):
        for overrides in ({"S": 3}, {"lr0": 0.0}, {"loss": "huber"}, {"patch": 48}, {"precision": "half"}):
            with self.assertRaises(ConfigurationError):
                load_train_config(overrides=overrides)

    def test_save_and_reload(self):
        cfg = TrainConfig(S=8, channels=(8, 8, 8), bands=7, precision="verification").validate()
        save_train_config(cfg, self.path)
        self.assertEqual(cfg, load_train_config(self.path))

    def test_patch_budget(self):
        self.assertEqual(100, TrainConfig().patch_count(10))
        self.assertEqual(1, TrainConfig().patch_count(5000))
        self.assertEqual(3, TrainConfig(patches_per_image=3).patch_count(10))


if __name__ == '__main__':
    unittest.main()
