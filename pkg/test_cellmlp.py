import math
import unittest

import numpy as np

from inrhsi import cellmlp, diffcore
from inrhsi.cellmlp import DEFAULT_LAYOUT, CellParams, MlpLayout
from inrhsi.diffcore import Precision, Tensor
from inrhsi.encoding import EncodingConfig, encode_grid
from inrhsi.errors import ConfigurationError, DimensionError, LayoutError

V = Precision.VERIFICATION


def random_params(layout, seed=0):
    rng = np.random.default_rng(seed)
    return CellParams(Tensor(rng.normal(size=layout.total), requires_grad=True, precision=V), layout)


class LayoutTests(unittest.TestCase):
    def test_default_parameter_count(self):
        self.assertEqual(23, DEFAULT_LAYOUT.in_dim)
        self.assertEqual(20191, DEFAULT_LAYOUT.total)

    def test_layer_dims(self):
        dims = DEFAULT_LAYOUT.layer_dims
        self.assertEqual(6, len(dims))
        self.assertEqual((23, 64), dims[0])
        self.assertEqual((64, 31), dims[-1])

    def test_offsets_tile_the_vector(self):
        layout = MlpLayout(in_dim=5, hidden_width=4, n_hidden=2, out_dim=3)
        cursor = 0
        for layer in layout.offsets:
            self.assertEqual(cursor, layer.weight_start)
            self.assertEqual(layer.weight_stop, layer.bias_start)
            cursor = layer.bias_stop
        self.assertEqual(layout.total, cursor)

    def test_encoding_off_uses_raw_coordinates(self):
        self.assertEqual(5, MlpLayout.for_encoding(EncodingConfig(enabled=False)).in_dim)

    def test_unknown_activation(self):
        with self.assertRaises(ConfigurationError):
            MlpLayout(in_dim=5, activation="tanh")


class CellMlpTests(unittest.TestCase):
    def test_length_mismatch(self):
        with self.assertRaises(LayoutError):
            CellParams(Tensor(np.zeros(DEFAULT_LAYOUT.total - 1), precision=V), DEFAULT_LAYOUT)

    def test_pack_inverts_unpack(self):
        layout = MlpLayout(in_dim=7, hidden_width=6, n_hidden=3, out_dim=4)
        params = random_params(layout)
        np.testing.assert_allclose(params.flat.data, cellmlp.pack(cellmlp.unpack(params), layout), rtol=1e-12)

    def test_unpack_scales_by_fan_in(self):
        layout = MlpLayout(in_dim=4, hidden_width=9, n_hidden=1, out_dim=2)
        params = CellParams(Tensor(np.ones(layout.total), precision=V), layout)
        (w0, b0), (w1, _) = cellmlp.unpack(params)
        np.testing.assert_allclose(np.full((4, 9), 0.5), w0.data)
        np.testing.assert_array_equal(np.ones(9), b0.data)
        np.testing.assert_allclose(np.full((9, 2), 1.0 / 3.0), w1.data)

    def test_outputs_in_unit_interval(self):
        layout = MlpLayout(in_dim=5, hidden_width=8, n_hidden=2, out_dim=6)
        params = random_params(layout, seed=3)
        x = Tensor(np.random.default_rng(1).normal(size=(10, 5)) * 10.0, precision=V)
        out = cellmlp.mlp_forward(x, cellmlp.unpack(params), layout)
        self.assertEqual((10, 6), out.shape)
        self.assertTrue(np.all((out.data >= 0.0) & (out.data <= 1.0)))

    def test_clamp_output_option(self):
        layout = MlpLayout(in_dim=5, hidden_width=8, n_hidden=2, out_dim=6, output_activation="clamp", activation="relu")
        params = random_params(layout, seed=5)
        x = Tensor(np.random.default_rng(2).normal(size=(10, 5)) * 10.0, precision=V)
        out = cellmlp.mlp_forward(x, cellmlp.unpack(params), layout).data
        self.assertGreaterEqual(out.min(), 0.0)
        self.assertLessEqual(out.max(), 1.0)

    def test_input_width_checked(self):
        layout = MlpLayout(in_dim=5, hidden_width=4, n_hidden=1, out_dim=2)
        with self.assertRaises(DimensionError):
            cellmlp.mlp_forward(Tensor(np.zeros((3, 4)), precision=V), cellmlp.unpack(random_params(layout)), layout)

    def test_batched_matches_per_cell(self):
        layout = MlpLayout(in_dim=5, hidden_width=8, n_hidden=3, out_dim=4)
        rng = np.random.default_rng(9)
        cells = Tensor(rng.normal(size=(3, layout.total)), precision=V)
        inputs = rng.normal(size=(3, 7, 5))
        batched = cellmlp.batched_mlp_forward(Tensor(inputs, precision=V), cells, layout).data
        for group in range(3):
            params = CellParams(Tensor(cells.data[group], precision=V), layout)
            single = cellmlp.mlp_forward(Tensor(inputs[group], precision=V), cellmlp.unpack(params), layout).data
            np.testing.assert_allclose(single, batched[group], rtol=1e-12, atol=1e-15)

    def test_evaluate_patch_shape(self):
        enc_cfg = EncodingConfig(n_freqs=2)
        layout = MlpLayout.for_encoding(enc_cfg, hidden_width=8, out_dim=5)
        rgb = np.random.default_rng(0).uniform(size=(3, 4, 6))
        out = cellmlp.evaluate_patch(rgb, encode_grid(6, 4, enc_cfg), random_params(layout))
        self.assertEqual((5, 4, 6), out.shape)



def layer_oracle(pixel, flat, layout):
    """Single-pixel forward pass written out with plain loops."""
    h = [float(value) for value in pixel]
    layers = layout.offsets
    for index, layer in enumerate(layers):
        scale = 1.0 / math.sqrt(layer.fan_in)
        out = []
        for j in range(layer.fan_out):
            total = flat[layer.bias_start + j]
            for i in range(layer.fan_in):
                total += h[i] * flat[layer.weight_start + i * layer.fan_out + j] * scale
            out.append(total)
        if index < len(layers) - 1:
            h = [value if value >= 0 else value * layout.slope for value in out]
        else:
            h = [1.0 / (1.0 + math.exp(-value)) for value in out]
    return h


class CellMlpPropertyTests(unittest.TestCase):
    def setUp(self):
        self.enc_cfg = EncodingConfig(n_freqs=2)
        self.layout = MlpLayout.for_encoding(self.enc_cfg, hidden_width=8, n_hidden=3, out_dim=5)

    def test_zero_parameters_give_one_half(self):
        params = CellParams(Tensor(np.zeros(self.layout.total), precision=V), self.layout)
        rgb = np.random.default_rng(0).uniform(size=(3, 4, 4))
        out = cellmlp.evaluate_patch(rgb, encode_grid(4, 4, self.enc_cfg), params)
        np.testing.assert_array_equal(np.full((5, 4, 4), 0.5), out.data)

    def test_single_pixel_matches_layer_oracle(self):
        rng = np.random.default_rng(1)
        for seed in range(5):
            params = random_params(self.layout, seed=seed)
            pixel = rng.uniform(-1.0, 1.0, size=self.layout.in_dim)
            out = cellmlp.mlp_forward(Tensor(pixel[None, :], precision=V), cellmlp.unpack(params), self.layout)
            np.testing.assert_allclose(layer_oracle(pixel, params.flat.data, self.layout), out.data[0], rtol=1e-12)

    def test_outputs_strictly_inside_unit_interval(self):
        layout = MlpLayout(in_dim=5, hidden_width=8, n_hidden=2, out_dim=6)
        rng = np.random.default_rng(2)
        for _ in range(1000):
            params = CellParams(Tensor(rng.normal(size=layout.total), precision=V), layout)
            x = np.concatenate([rng.uniform(size=(4, 3)), rng.uniform(-1.0, 1.0, size=(4, 2))], axis=1)
            out = cellmlp.mlp_forward(Tensor(x, precision=V), cellmlp.unpack(params), layout).data
            self.assertTrue(np.all((out > 0.0) & (out < 1.0)))

    def test_pixels_are_independent(self):
        params = random_params(self.layout, seed=3)
        enc = encode_grid(4, 4, self.enc_cfg)
        rgb = np.random.default_rng(3).uniform(size=(3, 4, 4))
        before = cellmlp.evaluate_patch(rgb, enc, params).data
        changed = rgb.copy()
        changed[:, 2, 1] = 1.0 - changed[:, 2, 1]
        after = cellmlp.evaluate_patch(changed, enc, params).data
        moved = np.any(before != after, axis=0)
        self.assertTrue(moved[2, 1])
        moved[2, 1] = False
        self.assertFalse(moved.any())

    def test_patch_equals_per_pixel_calls(self):
        params = random_params(self.layout, seed=4)
        enc = encode_grid(4, 4, self.enc_cfg)
        rgb = np.random.default_rng(4).uniform(size=(3, 4, 4))
        patch = cellmlp.evaluate_patch(rgb, enc, params).data
        layers = cellmlp.unpack(params)
        for row in range(4):
            for col in range(4):
                pixel = np.concatenate([rgb[:, row, col], enc[row, col]])[None, :]
                single = cellmlp.mlp_forward(Tensor(pixel, precision=V), layers, self.layout).data[0]
                np.testing.assert_allclose(single, patch[:, row, col], rtol=1e-12, atol=1e-15)

    def test_pixel_order_permutes_outputs(self):
        params = random_params(self.layout, seed=5)
        rng = np.random.default_rng(5)
        x = rng.uniform(size=(12, self.layout.in_dim))
        order = rng.permutation(12)
        layers = cellmlp.unpack(params)
        out = cellmlp.mlp_forward(Tensor(x, precision=V), layers, self.layout).data
        shuffled = cellmlp.mlp_forward(Tensor(x[order], precision=V), layers, self.layout).data
        np.testing.assert_allclose(out[order], shuffled, rtol=1e-12, atol=1e-15)

    def test_gradient_through_unpack(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.uniform(size=(6, self.layout.in_dim)), precision=V)
        target = rng.uniform(size=(6, self.layout.out_dim))

        def objective(flat):
            out = cellmlp.mlp_forward(x, cellmlp.unpack(CellParams(flat, self.layout)), self.layout)
            return diffcore.mse_loss(out, target)

        theta = Tensor(rng.normal(size=self.layout.total), precision=V)
        self.assertLess(diffcore.grad_check(objective, theta, h=1e-6), 1e-6)


if __name__ == '__main__':
    unittest.main()
