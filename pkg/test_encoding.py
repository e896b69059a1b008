import math
import unittest

import numpy as np

from inrhsi.encoding import EncodingConfig, encode_coord, encode_grid, pixel_centers
from inrhsi.errors import ConfigurationError, EncodingDomainError


class EncodingTests(unittest.TestCase):
    def test_default_dimension(self):
        self.assertEqual(20, EncodingConfig().dim)
        self.assertEqual(20, encode_coord((0.3, 0.7)).shape[0])

    def test_origin_single_frequency(self):
        np.testing.assert_array_equal([1.0, 0.0, 1.0, 0.0], encode_coord((0.0, 0.0), EncodingConfig(n_freqs=1)))

    def test_per_frequency_layout(self):
        encoded = encode_coord((0.5, 0.25), EncodingConfig(n_freqs=2))
        expected = [
            math.cos(math.pi / 2), math.sin(math.pi / 2), math.cos(math.pi / 4), math.sin(math.pi / 4),
            math.cos(math.pi), math.sin(math.pi), math.cos(math.pi / 2), math.sin(math.pi / 2),
        ]
        np.testing.assert_allclose(expected, encoded, atol=1e-12)

    def test_values_bounded(self):
        encoded = encode_grid(16, 16)
        self.assertLessEqual(np.abs(encoded).max(), 1.0)

    def test_each_axis_lies_on_unit_circle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            blocks = encode_coord(rng.uniform(size=2)).reshape(-1, 4)
            np.testing.assert_allclose(1.0, blocks[:, 0] ** 2 + blocks[:, 1] ** 2, atol=1e-12)
            np.testing.assert_allclose(1.0, blocks[:, 2] ** 2 + blocks[:, 3] ** 2, atol=1e-12)

    def test_outside_unit_square_rejected(self):
        for point in ((1.2, 0.5), (-0.1, 0.5), (0.5, 1.0001)):
            with self.assertRaises(EncodingDomainError):
                encode_coord(point)

    def test_boundaries_allowed(self):
        self.assertEqual(20, encode_coord((1.0, 1.0)).shape[0])

    def test_disabled_passes_raw_coordinates(self):
        cfg = EncodingConfig(enabled=False)
        self.assertEqual(2, cfg.dim)
        np.testing.assert_array_equal([0.25, 0.75], encode_coord((0.25, 0.75), cfg))
        self.assertEqual(2, EncodingConfig(n_freqs=0).dim)

    def test_grid_uses_pixel_centres(self):
        xs, ys = pixel_centers(4, 2)
        np.testing.assert_array_equal([0.125, 0.375, 0.625, 0.875], xs)
        np.testing.assert_array_equal([0.25, 0.75], ys)
        grid = encode_grid(4, 2, EncodingConfig(n_freqs=3))
        self.assertEqual((2, 4, 12), grid.shape)
        for row in range(2):
            for col in range(4):
                np.testing.assert_allclose(
                    encode_coord(((col + 0.5) / 4, (row + 0.5) / 2), EncodingConfig(n_freqs=3)), grid[row, col],
                    rtol=0.0, atol=1e-15,
                )

    def test_distinct_pixels_distinct_codes(self):
        grid = encode_grid(64, 64, EncodingConfig(n_freqs=5))
        codes = {row.tobytes() for row in grid.reshape(-1, grid.shape[-1])}
        self.assertEqual(64 * 64, len(codes))

    def test_negative_frequency_count(self):
        with self.assertRaises(ConfigurationError):
            EncodingConfig(n_freqs=-1)


if __name__ == '__main__':
    unittest.main()
