"""Luminance grids, central cropping and wavelet-domain noise residuals.

Every image entering the pipeline becomes a 2-D ``float64`` array of luminance
values (a *pixel grid*, rows = height). The noise residual of a grid is the grid
minus its denoised version, where denoising shrinks the detail subbands of an
orthogonal wavelet decomposition with a locally adaptive Wiener rule.
"""
from __future__ import annotations

import warnings
from pathlib import Path
from typing import Sequence

import numpy as np
import pywt
from numpy.typing import ArrayLike, NDArray
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import uniform_filter

from .config import DenoiserConfig
from .errors import ImageTooSmall, InvalidDecomposition, InvalidImage

PixelGrid = NDArray[np.float64]
ResidualNoise = NDArray[np.float64]

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
MIN_IMAGE_SIDE = 32
_PIL_PASSTHROUGH_MODES = {"L", "LA", "RGB", "RGBA"}


def to_luminance(image: ArrayLike) -> PixelGrid:
    array = np.asarray(image, dtype=np.float64)
    if array.size == 0:
        raise InvalidImage("Image has no pixels")
    if array.ndim == 2:
        return array.copy()
    if array.ndim != 3:
        raise InvalidImage(f"Expected an HxW or HxWxC image, got shape {array.shape}")
    channels = array.shape[2]
    if channels in (1, 2):
        return array[:, :, 0].copy()
    if channels in (3, 4):
        return array[:, :, :3] @ LUMA_WEIGHTS
    raise InvalidImage(f"Unsupported channel count: {channels}")


def center_crop(grid: PixelGrid, crop: tuple[int, int]) -> PixelGrid:
    """Return the centered ``crop`` window; ``crop`` is ``(width, height)``."""
    height, width = grid.shape
    crop_width, crop_height = crop
    if height < crop_height or width < crop_width:
        raise ImageTooSmall(f"Grid {width}x{height} is smaller than crop {crop_width}x{crop_height}")
    top = (height - crop_height) // 2
    left = (width - crop_width) // 2
    return grid[top : top + crop_height, left : left + crop_width].copy()


def wiener_shrink(band: NDArray[np.float64], noise_variance: float, window_sizes: Sequence[int]) -> NDArray[np.float64]:
    energy = band**2
    local_energy = np.stack([uniform_filter(energy, size=size, mode="constant") for size in window_sizes])
    signal_variance = np.maximum(local_energy.min(axis=0) - noise_variance, 0.0)
    return band * signal_variance / (signal_variance + noise_variance)


def denoise(grid: PixelGrid, cfg: DenoiserConfig) -> PixelGrid:
    grid = _checked_grid(grid)
    height, width = grid.shape
    min_side = 2**cfg.wavelet_levels
    if height < min_side or width < min_side:
        raise InvalidDecomposition(
            f"Grid {width}x{height} is too small for {cfg.wavelet_levels} wavelet levels (need >= {min_side})"
        )
    with warnings.catch_warnings():
        # pywt warns about boundary effects on deep levels; periodization keeps reconstruction exact.
        warnings.simplefilter("ignore", UserWarning)
        coeffs = pywt.wavedec2(grid, cfg.wavelet, mode="periodization", level=cfg.wavelet_levels)
        shrunk = [coeffs[0]]
        for details in coeffs[1:]:
            shrunk.append(tuple(wiener_shrink(band, cfg.noise_variance, cfg.window_sizes) for band in details))
        restored = pywt.waverec2(shrunk, cfg.wavelet, mode="periodization")
    return np.ascontiguousarray(restored[:height, :width])


def extract_residual(grid: PixelGrid, cfg: DenoiserConfig) -> ResidualNoise:
    grid = _checked_grid(grid)
    return grid - denoise(grid, cfg)


def load_grid(path: Path, crop: tuple[int, int]) -> PixelGrid:
    """Read a raster file, convert it to luminance and crop it to the pipeline size."""
    try:
        with Image.open(path) as img:
            if img.mode not in _PIL_PASSTHROUGH_MODES:
                img = img.convert("RGB")
            pixels = np.asarray(img)
    except (UnidentifiedImageError, OSError) as exc:
        raise InvalidImage(f"Cannot read image {path}: {exc}") from exc
    grid = to_luminance(pixels)
    height, width = grid.shape
    if min(height, width) < MIN_IMAGE_SIDE:
        raise ImageTooSmall(f"Image {path} is {width}x{height}; both sides must be >= {MIN_IMAGE_SIDE}")
    return center_crop(grid, crop)


def save_grid_png(grid: PixelGrid, path: Path) -> Path:
    pixels = np.clip(np.rint(grid), 0, 255).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path)
    return path


def _checked_grid(grid: ArrayLike) -> PixelGrid:
    array = np.asarray(grid, dtype=np.float64)
    if array.ndim != 2 or array.size == 0:
        raise InvalidImage(f"Expected a non-empty 2-D grid, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise InvalidImage("Grid contains non-finite values")
    return array
