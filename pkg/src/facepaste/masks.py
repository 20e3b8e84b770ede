"""Alpha masks for the pasted face: sigmoid reshaping, blurring and loading."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .exceptions import ConfigurationError, InvalidParameterError
from .raster import check_mask, read_png, to_grayscale

BIAS_RANGE = (0.0, 1.0)
SLOPE_RANGE = (5.0, 40.0)
SIGMA_RANGE = (0.0, 20.0)


@dataclass(frozen=True)
class MaskShapeParams:
    bias: float
    slope: float

    def __post_init__(self):
        if not BIAS_RANGE[0] <= self.bias <= BIAS_RANGE[1]:
            raise InvalidParameterError(f"bias must be in {BIAS_RANGE}, got {self.bias}")
        if not SLOPE_RANGE[0] <= self.slope <= SLOPE_RANGE[1]:
            raise InvalidParameterError(f"slope must be in {SLOPE_RANGE}, got {self.slope}")


def sigmoid_mask(mask, params):
    """Reshape a continuous mask with ``sigmoid((mask - bias) * slope)``."""
    mask = check_mask(mask)
    return expit((mask - params.bias) * params.slope)


def gaussian_kernel1d(sigma):
    """Normalized 1-D Gaussian with radius ``ceil(3 * sigma)``."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    with np.errstate(over="ignore"):  # tiny sigma: the off-center taps underflow to exactly 0
        k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur_mask(mask, sigma):
    """Gaussian blur of a binary mask with edge replication.

    ``sigma == 0`` returns the input unchanged.
    """
    mask = check_mask(mask)
    if not SIGMA_RANGE[0] <= sigma <= SIGMA_RANGE[1]:
        raise InvalidParameterError(f"sigma must be in {SIGMA_RANGE}, got {sigma}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise InvalidParameterError("blur_mask expects a binary mask")
    if sigma == 0:
        return mask.copy()
    k = gaussian_kernel1d(sigma)
    out = ndimage.correlate1d(mask, k, axis=0, mode="nearest")
    out = ndimage.correlate1d(out, k, axis=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def ellipse_mask(height, width, cy, cx, ry, rx):
    """Binary filled ellipse; used as the fallback face region."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return inside.astype(np.float64)


def fallback_mask(height, width):
    """Centered ellipse spanning 55% of the height and 40% of the width."""
    return ellipse_mask(
        height, width, (height - 1) / 2.0, (width - 1) / 2.0, 0.55 * height / 2.0, 0.40 * width / 2.0
    )


def auto_mask(img, luma_band=(0.3, 1.0), min_chroma=None, min_fraction=0.05, closing=3):
    """Heuristic binary face mask.

    Pixels whose luma lies in ``luma_band`` (and, optionally, whose red-blue
    chroma is at least ``min_chroma``) are grouped into connected components.
    The largest component is morphologically closed and hole-filled.  If it
    covers less than ``min_fraction`` of the image, a centered ellipse is
    returned instead, so the mask is never empty.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w = img.shape[:2]
    luma = to_grayscale(img)[:, :, 0]
    band = (luma >= luma_band[0]) & (luma <= luma_band[1])
    if min_chroma is not None and img.shape[2] == 3:
        band &= (img[:, :, 0] - img[:, :, 2]) >= min_chroma

    labels, n = ndimage.label(band)
    if n == 0:
        return fallback_mask(h, w)
    sizes = np.bincount(labels.ravel())[1:]
    region = labels == (int(np.argmax(sizes)) + 1)
    if closing > 0:
        structure = ndimage.generate_binary_structure(2, 1)
        # pad so closing does not erode regions that touch the border
        padded = np.pad(region, closing)
        padded = ndimage.binary_closing(padded, structure=structure, iterations=closing)
        region = padded[closing:-closing, closing:-closing]
    region = ndimage.binary_fill_holes(region)
    if region.sum() < min_fraction * h * w:
        return fallback_mask(h, w)
    return region.astype(np.float64)


def load_mask(path, shape=None):
    """Load an 8-bit grayscale PNG as a mask with values ``byte / 255``.

    ``shape`` is the ``(H, W)`` of the face image the mask belongs to.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"mask file not found: {path}")
    data = to_grayscale(read_png(path))[:, :, 0]
    if shape is not None and data.shape != tuple(shape[:2]):
        raise ConfigurationError(
            f"mask {path.name} has shape {data.shape}, expected {tuple(shape[:2])}"
        )
    return data


def mask_path(mask_dir, class_id):
    return Path(mask_dir) / f"mask_{class_id}.png"


def mask_extent(mask, threshold=0.5):
    """Height and width of the bounding box of ``mask >= threshold``.

    Falls back to the full mask size when no pixel reaches the threshold.
    """
    mask = np.asarray(mask)
    ys, xs = np.nonzero(mask >= threshold)
    if ys.size == 0:
        return mask.shape[0], mask.shape[1]
    return int(ys.max() - ys.min() + 1), int(xs.max() - xs.min() + 1)
