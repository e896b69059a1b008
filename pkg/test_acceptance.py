import os
import unittest

import numpy as np

from inrhsi import cli, dataio, metrics, pipeline
from inrhsi.checkpoint import Checkpoint
from inrhsi.config_store import TrainConfig

RUN_ACCEPTANCE = os.getenv("INRHSI_RUN_ACCEPTANCE", "") == "1"


@unittest.skipUnless(RUN_ACCEPTANCE, "set INRHSI_RUN_ACCEPTANCE=1 to run the long training checks")
class AcceptanceTests(unittest.TestCase):
    def test_overfits_a_tiny_scene(self):
        cube = dataio.synth_scene(32, 32, 31, seed=0)
        rgb = dataio.project_rgb(cube, dataio.gaussian_response(cube.wavelengths))
        cfg = TrainConfig(patch=32, S=4, n_freqs=5, hidden_width=64, lr0=1e-4, patches_per_image=1).validate()
        fit = pipeline.fit_scene(cfg, cube, rgb, steps=5000)
        estimate = pipeline.reconstruct(rgb, Checkpoint(cfg, cube.wavelengths, fit.weights, {}))
        self.assertGreaterEqual(metrics.psnr(cube, estimate)[1], 40.0)

    def test_single_patch_loss_falls_below_one_percent(self):
        cube = dataio.synth_scene(8, 8, 4, seed=0)
        rgb = dataio.project_rgb(cube, dataio.gaussian_response(cube.wavelengths))
        cfg = TrainConfig(patch=8, S=2, n_freqs=2, hidden_width=16, bands=4, channels=(8, 8),
                          lr0=1e-3, patches_per_image=1).validate()
        fit = pipeline.fit_scene(cfg, cube, rgb, steps=3000)
        self.assertLess(min(fit.losses), 1e-2)

    def test_encoding_beats_raw_coordinates(self):
        rows = {row["value"]: row for row in cli.run_sweep("encoding", [0, 5], [0, 1, 2], 32, 8, 1500)}
        self.assertGreaterEqual(rows[5]["psnr_db"] - rows[0]["psnr_db"], 2.0)

    def test_finer_grid_has_weaker_seams(self):
        rows = {row["value"]: row for row in cli.run_sweep("grid", [2, 16], [0, 1, 2], 32, 8, 1500)}
        self.assertLess(rows[16]["seam_score"], rows[2]["seam_score"])
        self.assertTrue(np.isfinite(rows[16]["psnr_db"]))


if __name__ == '__main__':
    unittest.main()
