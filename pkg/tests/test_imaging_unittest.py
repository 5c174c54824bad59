from __future__ import annotations

import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pywt
from PIL import Image
from scipy.ndimage import uniform_filter

SRC = Path(__file__).resolve().parents[1] / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from camlink.config import DenoiserConfig
from camlink.errors import ImageTooSmall, InvalidDecomposition, InvalidImage
from camlink.imaging import center_crop, denoise, extract_residual, load_grid, to_luminance


def _loop_denoise(grid: np.ndarray, cfg: DenoiserConfig) -> np.ndarray:
    """Level-by-level dwt2/idwt2 with a per-band Wiener rule."""

    def shrink(band: np.ndarray) -> np.ndarray:
        estimates = []
        for size in cfg.window_sizes:
            mean_energy = uniform_filter(band**2, size=size, mode="constant")
            estimates.append(np.maximum(mean_energy - cfg.noise_variance, 0.0))
        variance = np.min(estimates, axis=0)
        return band * variance / (variance + cfg.noise_variance)

    approx = grid
    details = []
    for _ in range(cfg.wavelet_levels):
        approx, (ch, cv, cd) = pywt.dwt2(approx, cfg.wavelet, mode="periodization")
        details.append((shrink(ch), shrink(cv), shrink(cd)))
    for ch, cv, cd in reversed(details):
        approx = pywt.idwt2((approx, (ch, cv, cd)), cfg.wavelet, mode="periodization")
    return approx


class LuminanceTests(unittest.TestCase):
    def test_gray_rgb_pixel(self) -> None:
        self.assertAlmostEqual(float(to_luminance(np.full((1, 1, 3), 50.0))[0, 0]), 50.0)

    def test_red_pixel_weighted_sum(self) -> None:
        self.assertAlmostEqual(float(to_luminance(np.array([[[255.0, 0.0, 0.0]]]))[0, 0]), 76.245)

    def test_single_channel_passes_through(self) -> None:
        grid = np.arange(12, dtype=float).reshape(3, 4)
        np.testing.assert_array_equal(to_luminance(grid), grid)
        np.testing.assert_array_equal(to_luminance(grid[:, :, None]), grid)

    def test_alpha_channel_ignored(self) -> None:
        rgba = np.zeros((2, 2, 4))
        rgba[..., 1] = 100.0
        rgba[..., 3] = 255.0
        np.testing.assert_allclose(to_luminance(rgba), np.full((2, 2), 58.7))

    def test_empty_image_rejected(self) -> None:
        with self.assertRaises(InvalidImage):
            to_luminance(np.zeros((0, 0, 3)))


class CropTests(unittest.TestCase):
    def test_identity_crop(self) -> None:
        grid = np.random.default_rng(0).uniform(0, 255, size=(256, 256))
        np.testing.assert_array_equal(center_crop(grid, (256, 256)), grid)

    def test_symmetric_offsets(self) -> None:
        grid = np.arange(25, dtype=float).reshape(5, 5)
        np.testing.assert_array_equal(center_crop(grid, (3, 3)), grid[1:4, 1:4])

    def test_floor_offsets_for_odd_margins(self) -> None:
        grid = np.arange(42, dtype=float).reshape(6, 7)
        np.testing.assert_array_equal(center_crop(grid, (4, 3)), grid[1:4, 1:5])

    def test_crop_is_idempotent(self) -> None:
        grid = np.random.default_rng(1).uniform(0, 255, size=(41, 57))
        for crop in ((57, 41), (32, 32), (20, 7), (1, 1)):
            with self.subTest(crop=crop):
                once = center_crop(grid, crop)
                np.testing.assert_array_equal(center_crop(once, crop), once)

    def test_grid_smaller_than_crop(self) -> None:
        grid = np.zeros((3, 6))
        with self.assertRaises(ImageTooSmall):
            center_crop(grid, (4, 4))


class DenoiseTests(unittest.TestCase):
    def setUp(self) -> None:
        self.cfg = DenoiserConfig(crop=(64, 64))
        self.grid = np.random.default_rng(3).uniform(0, 255, size=(64, 64))

    def test_matches_levelwise_oracle(self) -> None:
        np.testing.assert_allclose(denoise(self.grid, self.cfg), _loop_denoise(self.grid, self.cfg), atol=1e-9)

    def test_residual_definition(self) -> None:
        residual = extract_residual(self.grid, self.cfg)
        self.assertEqual(residual.shape, self.grid.shape)
        np.testing.assert_allclose(residual, self.grid - denoise(self.grid, self.cfg), atol=1e-12)
        self.assertTrue(np.all(np.isfinite(residual)))

    def test_constant_grid_has_no_residual(self) -> None:
        residual = extract_residual(np.full((64, 64), 128.0), self.cfg)
        self.assertLess(float(np.abs(residual).max()), 1e-9)

    def test_residual_energy_bounded_by_centered_grid(self) -> None:
        rng = np.random.default_rng(6)
        for shape in ((64, 64), (37, 45), (48, 80)):
            grid = rng.uniform(0, 255, size=shape)
            with self.subTest(shape=shape):
                residual = extract_residual(grid, self.cfg)
                self.assertLessEqual(float(np.sum(residual**2)), float(np.sum((grid - grid.mean()) ** 2)))

    def test_odd_sizes_keep_shape(self) -> None:
        grid = np.random.default_rng(5).uniform(0, 255, size=(37, 45))
        self.assertEqual(denoise(grid, self.cfg).shape, (37, 45))

    def test_too_small_for_levels(self) -> None:
        with self.assertRaises(InvalidDecomposition):
            denoise(np.zeros((8, 8)), self.cfg)

    def test_non_finite_grid_rejected(self) -> None:
        grid = self.grid.copy()
        grid[0, 0] = np.nan
        with self.assertRaises(InvalidImage):
            denoise(grid, self.cfg)


class LoadGridTests(unittest.TestCase):
    def test_rgb_png_loaded_as_cropped_luminance(self) -> None:
        rgb = np.zeros((40, 50, 3), dtype=np.uint8)
        rgb[..., 0] = 255
        with tempfile.TemporaryDirectory() as td:
            path = Path(td) / "red.png"
            Image.fromarray(rgb).save(path)
            grid = load_grid(path, (32, 32))
        self.assertEqual(grid.shape, (32, 32))
        np.testing.assert_allclose(grid, 76.245)

    def test_small_image_rejected(self) -> None:
        with tempfile.TemporaryDirectory() as td:
            path = Path(td) / "tiny.png"
            Image.fromarray(np.zeros((20, 64), dtype=np.uint8)).save(path)
            with self.assertRaises(ImageTooSmall):
                load_grid(path, (16, 16))

    def test_unreadable_file(self) -> None:
        with tempfile.TemporaryDirectory() as td:
            path = Path(td) / "broken.png"
            path.write_bytes(b"not an image")
            with self.assertRaises(InvalidImage):
                load_grid(path, (32, 32))


if __name__ == "__main__":
    unittest.main()
