"""Rank-3 real arrays shaped (channels, height, width), resampling and patch cropping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def as_tensor(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3:
        raise ValueError(f"expected a (channels, height, width) array, got shape {t.shape}")
    return t


def _axis_weights(n_in: int, n_out: int):
    """Corner-aligned source indices and weights along one axis."""
    if n_out == 1:
        src = np.array([(n_in - 1) / 2.0])
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.floor(src).astype(np.intp)
    lo = np.clip(lo, 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(t, out_height: int, out_width: int) -> np.ndarray:
    """Resize every channel with corner-aligned bilinear interpolation.

    Output corner pixels coincide with input corner pixels, so resizing to the
    input size is the identity.
    """
    t = as_tensor(t)
    if t.size == 0:
        raise ValueError("cannot resize an empty tensor")
    if out_height < 1 or out_width < 1:
        raise ValueError(f"target size must be positive, got {out_height}x{out_width}")
    _, h, w = t.shape
    if (h, w) == (out_height, out_width):
        return t.copy()

    r0, r1, fr = _axis_weights(h, out_height)
    c0, c1, fc = _axis_weights(w, out_width)
    fr = fr[None, :, None]
    rows = t[:, r0, :] * (1.0 - fr) + t[:, r1, :] * fr
    fc = fc[None, None, :]
    out = rows[:, :, c0] * (1.0 - fc) + rows[:, :, c1] * fc
    lo = t.min(axis=(1, 2), keepdims=True)
    hi = t.max(axis=(1, 2), keepdims=True)
    return np.clip(out, lo, hi)


@dataclass
class ImagePlane:
    """An RGB image with values in [0, 1], stored as a (3, H, W) tensor."""

    rgb: np.ndarray

    def __post_init__(self):
        rgb = as_tensor(self.rgb)
        if rgb.shape[0] != 3:
            raise ValueError(f"an image plane needs 3 channels, got {rgb.shape[0]}")
        if not np.all(np.isfinite(rgb)):
            raise ValueError("image contains non-finite values")
        self.rgb = np.clip(rgb, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.rgb.shape[1]

    @property
    def width(self) -> int:
        return self.rgb.shape[2]

    def mean_color(self) -> np.ndarray:
        return self.rgb.mean(axis=(1, 2))

    def scaled(self, scale: float) -> "ImagePlane":
        h = max(1, int(round(self.height * scale)))
        w = max(1, int(round(self.width * scale)))
        return ImagePlane(bilinear_resize(self.rgb, h, w))


def crop_patch(img, center_row: int, center_col: int, size: int) -> np.ndarray:
    """Crop a size x size patch centred on a pixel, replicating the border outside the image."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"patch size must be a positive odd number, got {size}")
    rgb = img.rgb if isinstance(img, ImagePlane) else as_tensor(img)
    _, h, w = rgb.shape
    r = size // 2
    rows = np.clip(np.arange(center_row - r, center_row + r + 1), 0, h - 1)
    cols = np.clip(np.arange(center_col - r, center_col + r + 1), 0, w - 1)
    return rgb[:, rows[:, None], cols[None, :]]
