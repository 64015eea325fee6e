"""Image resizing and conversion to network input tensors."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import ImageSample

INPUT_SCALE = 64.0


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of an HxWxC array using half-pixel centers.

    Returns float64; callers decide on rounding.
    """
    src = np.asarray(image, dtype=np.float64)
    in_h, in_w = src.shape[:2]
    if (in_h, in_w) == (height, width):
        return src.copy()

    def axis(out_n: int, in_n: int):
        coords = (np.arange(out_n) + 0.5) * (in_n / out_n) - 0.5
        coords = np.clip(coords, 0.0, in_n - 1)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, in_n - 1)
        return lo, hi, coords - lo

    y0, y1, wy = axis(height, in_h)
    x0, x1, wx = axis(width, in_w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bottom = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def sample_to_input(sample: ImageSample, height: int, width: int) -> np.ndarray:
    """CHW float32 tensor, resized if needed and normalized per image.

    Each channel has its image mean removed and is scaled by 1/64, so the
    network sees local deviations from the skin tone rather than the tone.
    """
    arr = sample.to_array()
    if arr.shape[:2] != (height, width):
        arr = resize_bilinear(arr, height, width)
    arr = np.asarray(arr, dtype=np.float64)
    arr = (arr - arr.mean(axis=(0, 1), keepdims=True)) / INPUT_SCALE
    return arr.astype(np.float32).transpose(2, 0, 1)


def batch_from_samples(samples: Sequence[ImageSample], height: int, width: int) -> np.ndarray:
    if not samples:
        return np.zeros((0, 3, height, width), dtype=np.float32)
    return np.stack([sample_to_input(s, height, width) for s in samples]).astype(np.float32)
