"""Landmark heatmaps and aligned eye-patch extraction."""
from __future__ import annotations

import math

import numpy as np

from . import _kernels

N_LANDMARKS = 28
# corner landmarks of the outer-eye outline: two canthi, upper and lower lid midpoints
EYE_CORNERS = (8, 14, 11, 17)
PEAK = 1.0 / (2.0 * np.pi)


class LandmarkError(ValueError):
    pass


def as_landmarks(points) -> np.ndarray:
    """Validate and return a (28, 2) float64 landmark array."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape != (N_LANDMARKS, 2):
        raise LandmarkError(f"expected {N_LANDMARKS} (x, y) landmarks, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise LandmarkError("landmark coordinates must be finite")
    return pts


def gaussian_heatmap(landmarks, width: int, height: int, scale: float = 1.0) -> np.ndarray:
    """Render one unit-covariance Gaussian density per landmark.

    Values are sampled at pixel centres ``(x + 0.5, y + 0.5)``; the result has
    shape ``(height, width, 28)`` and peaks at ``scale / (2 pi)``.
    """
    pts = as_landmarks(landmarks)
    if width < 1 or height < 1:
        raise ValueError("heatmap width and height must be >= 1")
    return _kernels.gaussian_heatmap_kernel(pts, int(width), int(height), float(scale))


def eye_center(landmarks) -> tuple[float, float]:
    pts = as_landmarks(landmarks)
    c = pts[list(EYE_CORNERS)].mean(axis=0)
    return float(c[0]), float(c[1])


def round_half_away(v: float) -> int:
    return int(math.copysign(math.floor(abs(v) + 0.5), v))


def patch_origin(center, size: int) -> tuple[int, int]:
    """Top-left (x, y) pixel of a ``size`` patch centred on ``center``."""
    cx, cy = center
    return round_half_away(cx - size / 2.0), round_half_away(cy - size / 2.0)


def crop_patch(image, center, size: int, max_ratio: float = 2.0) -> np.ndarray:
    """Axis-aligned ``size x size`` crop around ``center`` with zero fill.

    ``image`` is H x W x C. The same centre gives the same geometry for any
    channel count, which keeps RGB and heatmap patches registered.
    """
    img = np.asarray(image)
    if size < 1:
        raise ValueError("patch size must be >= 1")
    h, w = img.shape[:2]
    if size > max_ratio * max(h, w):
        raise ValueError(f"patch size {size} exceeds {max_ratio}x the image extent {max(h, w)}")
    x0, y0 = patch_origin(center, size)
    out = np.zeros((size, size) + img.shape[2:], dtype=img.dtype)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + size, w), min(y0 + size, h)
    if sx1 > sx0 and sy1 > sy0:
        out[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = img[sy0:sy1, sx0:sx1]
    return out


def heatmap_patch(landmarks, center, size: int, image_shape, scale: float = 1.0) -> np.ndarray:
    """Equivalent to cropping the full-frame heatmap, but only renders the patch.

    Pixels of the patch that fall outside the ``image_shape`` (H, W) frame are
    zero, matching :func:`crop_patch` on a full heatmap.
    """
    pts = as_landmarks(landmarks)
    h, w = image_shape[:2]
    if size > 2.0 * max(h, w):
        raise ValueError(f"patch size {size} exceeds 2x the image extent {max(h, w)}")
    x0, y0 = patch_origin(center, size)
    # integer shift keeps pixel-centre offsets identical to the full-frame render
    hm = gaussian_heatmap(pts - np.array([x0, y0], dtype=np.float64), size, size, scale)
    ys = np.arange(size) + y0
    xs = np.arange(size) + x0
    inside = ((ys >= 0) & (ys < h))[:, None] & ((xs >= 0) & (xs < w))[None, :]
    hm[~inside] = 0.0
    return hm


def bilinear_downscale(t, target: int) -> np.ndarray:
    """Resize a square H x W x C array to ``target x target``.

    Source coordinate for output index i is ``(i + 0.5) * H / target - 0.5``,
    clamped to the border.
    """
    arr = np.asarray(t)
    if target < 1:
        raise ValueError("target size must be >= 1")
    if arr.ndim == 2:
        return bilinear_downscale(arr[:, :, None], target)[:, :, 0]
    h, w = arr.shape[:2]
    if h != w or target > h:
        raise ValueError(f"expected a square input no smaller than {target}, got {h}x{w}")
    if target == h:
        return arr.astype(np.float64)
    return _kernels.bilinear_resize_kernel(arr, target, target)
