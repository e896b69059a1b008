import json
import math
import tempfile
import unittest
from pathlib import Path

import numpy as np
from PIL import Image

from inrhsi import metrics
from inrhsi.errors import BandIndexError, DimensionError


def gaussian_window():
    offsets = np.arange(-5, 6)
    taps = np.exp(-0.5 * offsets ** 2 / 1.5 ** 2)
    taps /= taps.sum()
    return np.outer(taps, taps)


def windowed_ssim_oracle(a, b):
    window = gaussian_window()
    height, width = a.shape
    values = []
    for r in range(5, height - 5):
        for c in range(5, width - 5):
            pa, pb = a[r - 5:r + 6, c - 5:c + 6], b[r - 5:r + 6, c - 5:c + 6]
            mu_a, mu_b = (window * pa).sum(), (window * pb).sum()
            var_a = (window * pa * pa).sum() - mu_a ** 2
            var_b = (window * pb * pb).sum() - mu_b ** 2
            cov = (window * pa * pb).sum() - mu_a * mu_b
            values.append(
                ((2 * mu_a * mu_b + 1e-4) * (2 * cov + 9e-4))
                / ((mu_a ** 2 + mu_b ** 2 + 1e-4) * (var_a + var_b + 9e-4))
            )
    return float(np.mean(values))


class ReferenceOracleTests(unittest.TestCase):
    def test_random_small_cubes(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            Y, Yh = rng.uniform(size=(4, 8, 8)), rng.uniform(size=(4, 8, 8))
            band_psnr, band_ssim = [], []
            for band in range(4):
                a, b = Y[band].ravel(), Yh[band].ravel()
                band_psnr.append(10.0 * math.log10(1.0 / (sum((x - y) ** 2 for x, y in zip(a, b)) / a.size)))
                mu_a, mu_b = sum(a) / a.size, sum(b) / b.size
                var_a = sum((x - mu_a) ** 2 for x in a) / a.size
                var_b = sum((y - mu_b) ** 2 for y in b) / b.size
                cov = sum((x - mu_a) * (y - mu_b) for x, y in zip(a, b)) / a.size
                band_ssim.append(
                    ((2 * mu_a * mu_b + 1e-4) * (2 * cov + 9e-4))
                    / ((mu_a ** 2 + mu_b ** 2 + 1e-4) * (var_a + var_b + 9e-4))
                )
            angles = []
            for r in range(8):
                for c in range(8):
                    u, v = Y[:, r, c], Yh[:, r, c]
                    cosine = float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
                    angles.append(math.degrees(math.acos(min(1.0, max(-1.0, cosine)))))

            report = metrics.evaluate(Y, Yh)
            self.assertAlmostEqual(sum(band_psnr) / 4, report.psnr, delta=1e-6)
            self.assertAlmostEqual(sum(band_ssim) / 4, report.ssim, delta=1e-6)
            self.assertAlmostEqual(sum(angles) / 64, report.sam, delta=1e-6)


class PsnrTests(unittest.TestCase):
    def test_constant_error_of_a_tenth(self):
        per_band, mean = metrics.psnr(np.zeros((2, 4, 4)), np.full((2, 4, 4), 0.1))
        self.assertAlmostEqual(20.0, mean, places=9)
        np.testing.assert_allclose([20.0, 20.0], per_band)

    def test_identical_cubes_score_infinity(self):
        cube = np.random.default_rng(0).uniform(size=(3, 5, 5))
        self.assertEqual(math.inf, metrics.psnr(cube, cube)[1])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        Y, Yh = rng.uniform(size=(3, 6, 7)), rng.uniform(size=(3, 6, 7))
        expected = []
        for band in range(3):
            err = sum((Y[band, r, c] - Yh[band, r, c]) ** 2 for r in range(6) for c in range(7)) / 42
            expected.append(10 * math.log10(1.0 / err))
        per_band, mean = metrics.psnr(Y, Yh)
        np.testing.assert_allclose(expected, per_band, rtol=1e-12)
        self.assertAlmostEqual(sum(expected) / 3, mean, places=10)

    def test_per_image_peak(self):
        Y = np.full((1, 2, 2), 0.5)
        _, mean = metrics.psnr(Y, Y - 0.05, per_image_peak=True)
        self.assertAlmostEqual(20.0, mean, places=9)

    def test_per_image_peak_with_dark_band(self):
        Y = np.zeros((2, 2, 2))
        Y[1] = 0.5
        Yh = Y.copy()
        Yh[0, 0, 0] = 0.1
        Yh[1] -= 0.05
        per_band, _ = metrics.psnr(Y, Yh, per_image_peak=True)
        self.assertAlmostEqual(10.0 * math.log10(400.0), per_band[0], places=9)
        self.assertAlmostEqual(20.0, per_band[1], places=9)
        report = metrics.evaluate(Y, Yh, per_image_peak=True)
        self.assertEqual("per_image", report.peak)
        self.assertTrue(math.isfinite(report.psnr))

    def test_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            metrics.psnr(np.zeros((2, 4, 4)), np.zeros((2, 4, 5)))


class SsimTests(unittest.TestCase):
    def test_identical_bands(self):
        cube = np.random.default_rng(2).uniform(size=(2, 16, 16))
        per_band, mean, fallback = metrics.ssim(cube, cube)
        self.assertAlmostEqual(1.0, mean, places=12)
        self.assertFalse(fallback)

    def test_inverted_image_scores_lower(self):
        cube = np.random.default_rng(3).uniform(size=(1, 16, 16))
        self.assertLess(metrics.ssim(cube, 1.0 - cube)[1], 1.0)

    def test_symmetric(self):
        rng = np.random.default_rng(4)
        a, b = rng.uniform(size=(2, 16, 16)), rng.uniform(size=(2, 16, 16))
        self.assertAlmostEqual(metrics.ssim(a, b)[1], metrics.ssim(b, a)[1], places=12)

    def test_matches_windowed_oracle(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(size=(2, 16, 16))
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0.0, 1.0)
        per_band, _, _ = metrics.ssim(a, b)
        for band in range(2):
            self.assertAlmostEqual(windowed_ssim_oracle(a[band], b[band]), per_band[band], delta=1e-6)

    def test_small_cube_uses_global_statistics(self):
        cube = np.random.default_rng(6).uniform(size=(2, 8, 8))
        _, mean, fallback = metrics.ssim(cube, cube)
        self.assertTrue(fallback)
        self.assertAlmostEqual(1.0, mean, places=12)
        self.assertTrue(metrics.evaluate(cube, cube).ssim_global_fallback)


class SamTests(unittest.TestCase):
    def spectra(self, u, v):
        return np.array(u, dtype=float).reshape(-1, 1, 1), np.array(v, dtype=float).reshape(-1, 1, 1)

    def test_known_angles(self):
        for v, expected in (([2.0, 0.0], 0.0), ([1.0, 1.0], 45.0), ([0.0, 3.0], 90.0)):
            _, mean = metrics.sam(*self.spectra([1.0, 0.0], v))
            self.assertAlmostEqual(expected, mean, delta=1e-9)

    def test_scale_invariant(self):
        rng = np.random.default_rng(7)
        Y, Yh = rng.uniform(0.1, 1.0, size=(5, 3, 3)), rng.uniform(0.1, 1.0, size=(5, 3, 3))
        np.testing.assert_allclose(metrics.sam(Y, Yh)[0], metrics.sam(Y, 4.0 * Yh)[0], atol=1e-9)

    def test_per_pixel_map(self):
        degrees, _ = metrics.sam(np.ones((3, 2, 4)), np.ones((3, 2, 4)))
        self.assertEqual((2, 4), degrees.shape)
        np.testing.assert_allclose(0.0, degrees, atol=1e-9)


class DiffMapTests(unittest.TestCase):
    def test_band_out_of_range(self):
        with self.assertRaises(BandIndexError):
            metrics.diff_map(np.zeros((31, 4, 4)), np.zeros((31, 4, 4)), [31])

    def test_default_bands(self):
        rng = np.random.default_rng(8)
        Y, Yh = rng.uniform(size=(31, 4, 4)), rng.uniform(size=(31, 4, 4))
        maps = metrics.diff_map(Y, Yh, metrics.FIGURE_BANDS)
        self.assertEqual(list(metrics.FIGURE_BANDS), list(maps))
        for band, image in maps.items():
            self.assertEqual(np.abs(Y[band] - Yh[band]).max(), image.max())

    def test_pgm_pixels_and_scale_file(self):
        image = np.array([[0.0, 0.25], [0.5, 0.125]])
        with tempfile.TemporaryDirectory() as tmp:
            path, scales_path = metrics.write_diff_maps({3: image}, tmp, wavelengths=np.arange(400.0, 440.0, 10.0))
            raw = Path(path).read_bytes()
            with Image.open(path) as pgm:
                self.assertEqual(("PPM", "L", (2, 2)), (pgm.format, pgm.mode, pgm.size))
                pixels = np.asarray(pgm)
            scales = json.loads(Path(scales_path).read_text(encoding="utf-8"))
        self.assertEqual("diff_band03.pgm", Path(path).name)
        self.assertTrue(raw.startswith(b"P5"))
        np.testing.assert_array_equal([[0, 128], [255, 64]], pixels)
        self.assertEqual(metrics.DIFF_SCALES_NAME, Path(scales_path).name)
        self.assertEqual({"3": {"file": "diff_band03.pgm", "scale": 0.5, "wavelength_nm": 430.0}}, scales)

    def test_all_zero_map(self):
        with tempfile.TemporaryDirectory() as tmp:
            path, _ = metrics.write_diff_maps({0: np.zeros((3, 4))}, tmp)
            with Image.open(path) as pgm:
                np.testing.assert_array_equal(np.zeros((3, 4), dtype=np.uint8), np.asarray(pgm))


class SeamScoreTests(unittest.TestCase):
    def test_blocky_image_scores_positive(self):
        rng = np.random.default_rng(9)
        blocks = np.kron(rng.uniform(size=(1, 4, 4)), np.ones((1, 4, 4)))
        self.assertGreater(metrics.block_seam_score(blocks, 4), 0.1)

    def test_linear_ramp_has_no_seams(self):
        ramp = np.tile(np.linspace(0.0, 1.0, 16), (1, 16, 1))
        self.assertAlmostEqual(0.0, metrics.block_seam_score(ramp, 4), places=12)

    def test_cell_too_small(self):
        with self.assertRaises(DimensionError):
            metrics.block_seam_score(np.zeros((1, 4, 4)), 1)


class ReportTests(unittest.TestCase):
    def test_infinite_psnr_written_as_string(self):
        cube = np.random.default_rng(10).uniform(size=(2, 12, 12))
        report = metrics.evaluate(cube, cube)
        with tempfile.TemporaryDirectory() as tmp:
            text_path, json_path = metrics.write_report(report, tmp)
            data = json.loads(Path(json_path).read_text(encoding="utf-8"))
            text = Path(text_path).read_text(encoding="utf-8")
        self.assertEqual("inf", data["psnr_db"])
        self.assertEqual(["inf", "inf"], data["per_band"]["psnr"])
        self.assertAlmostEqual(0.0, data["sam_deg"], places=9)
        self.assertIn("psnr_db=inf", text.splitlines())
        self.assertIn("ssim=1.000000", text.splitlines())


if __name__ == '__main__':
    unittest.main()
