"""Float raster images, bilinear geometry and alpha compositing.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` with ``C`` in
``{1, 3}`` and intensities in ``[0, 1]``.  Masks are ``(H, W)`` arrays.
All functions are pure and never modify their inputs.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .exceptions import ConfigurationError, InvalidParameterError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Placement:
    """Center of a pasted overlay in base-image pixel coordinates.

    The center may lie outside the base image, in which case the overlay is
    cropped at the border.
    """

    cx: float
    cy: float


def check_image(img, name="img"):
    """Validate an image and return it as a float64 ``(H, W, C)`` array.

    A 2-D array is accepted as a single-channel image.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise InvalidParameterError(
            f"{name} must have shape (H, W), (H, W, 1) or (H, W, 3), got {arr.shape}"
        )
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidParameterError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InvalidParameterError(f"{name} intensities must lie in [0, 1]")
    return arr


def check_mask(mask, name="mask"):
    arr = np.asarray(mask, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise InvalidParameterError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise InvalidParameterError(f"{name} values must lie in [0, 1]")
    return arr


@lru_cache(maxsize=256)
def interp_matrix(n_in, n_out):
    """Dense ``(n_out, n_in)`` bilinear resampling matrix along one axis.

    Pixel centers are aligned (``src = (dst + 0.5) * n_in / n_out - 0.5``) and
    source coordinates are clamped to the valid range.  Every row sums to 1.
    The returned array is read-only because it is cached.
    """
    if n_in < 1 or n_out < 1:
        raise InvalidParameterError("axis lengths must be >= 1")
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    mat.setflags(write=False)
    return mat


def resize_to(img, height, width):
    """Bilinear resize of an image or mask to an explicit ``(height, width)``."""
    arr = np.asarray(img, dtype=np.float64)
    ry = interp_matrix(arr.shape[0], int(height))
    rx = interp_matrix(arr.shape[1], int(width))
    if arr.ndim == 2:
        out = ry @ arr @ rx.T
    else:
        h, w, c = arr.shape
        tmp = (ry @ arr.reshape(h, w * c)).reshape(-1, w, c)
        out = np.matmul(tmp.transpose(0, 2, 1), rx.T).transpose(0, 2, 1)
    return np.clip(out, 0.0, 1.0)


def scaled_shape(shape, sx, sy):
    if not (sx > 0 and sy > 0):
        raise InvalidParameterError(f"scale factors must be positive, got sx={sx}, sy={sy}")
    h = max(1, int(math.floor(shape[0] * sy + 0.5)))
    w = max(1, int(math.floor(shape[1] * sx + 0.5)))
    return h, w


def resize_bilinear(img, sx, sy):
    """Scale an image (or mask) by ``sx`` horizontally and ``sy`` vertically."""
    arr = np.asarray(img, dtype=np.float64)
    h, w = scaled_shape(arr.shape, sx, sy)
    if (h, w) == arr.shape[:2]:
        return arr.copy()
    return resize_to(arr, h, w)


def rotated_shape(height, width, theta):
    t = math.radians(theta)
    c, s = abs(math.cos(t)), abs(math.sin(t))
    # 1e-9 guards against 4.0000000001 turning into 5
    h = max(1, math.ceil(height * c + width * s - 1e-9))
    w = max(1, math.ceil(width * c + height * s - 1e-9))
    return h, w


def rotate_bilinear(img, theta, window=None):
    """Rotate about the image center by ``theta`` degrees (counter-clockwise).

    The canvas grows to hold the whole rotated rectangle.  Returns
    ``(rotated, validity)`` where ``validity`` is 1 for output pixels whose
    inverse-mapped location falls inside the source and 0 elsewhere.
    Invalid pixels carry clamped edge values and must be masked by the caller.

    ``window=(row0, row1, col0, col1)`` evaluates only that block of the
    output canvas; the values equal the corresponding block of the full
    result.
    """
    arr = np.asarray(img, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    h, w = arr.shape[:2]
    if theta == 0:
        r0, r1, c0, c1 = window if window is not None else (0, h, 0, w)
        out = arr[r0:r1, c0:c1].copy()
        valid = np.ones(out.shape[:2])
        return (out[:, :, 0] if squeeze else out), valid

    oh, ow = rotated_shape(h, w, theta)
    r0, r1, c0, c1 = window if window is not None else (0, oh, 0, ow)
    t = math.radians(theta)
    c, s = math.cos(t), math.sin(t)
    # inverse map in (row, col) order: src = rot @ (dst - out_center) + in_center
    rot = np.array([[c, s], [-s, c]])
    out_center = np.array([(oh - 1) / 2.0, (ow - 1) / 2.0])
    in_center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = in_center - rot @ out_center + rot @ np.array([r0, c0], dtype=np.float64)

    dy = np.arange(r1 - r0, dtype=np.float64)[:, None]
    dx = np.arange(c1 - c0, dtype=np.float64)[None, :]
    ys = rot[0, 0] * dy + rot[0, 1] * dx + offset[0]
    xs = rot[1, 0] * dy + rot[1, 1] * dx + offset[1]
    valid = ((xs >= -0.5) & (xs <= w - 0.5) & (ys >= -0.5) & (ys <= h - 0.5)).astype(np.float64)

    out = np.empty((r1 - r0, c1 - c0, arr.shape[2]))
    for ch in range(arr.shape[2]):
        # order-1 spline == bilinear; "nearest" mode clamps out-of-range coordinates
        ndimage.affine_transform(
            arr[:, :, ch], rot, offset=offset, output_shape=out.shape[:2], output=out[:, :, ch],
            order=1, mode="nearest",
        )
    out = np.clip(out, 0.0, 1.0)
    return (out[:, :, 0] if squeeze else out), valid


def overlay_window(base_shape, overlay_shape, place):
    """Return matching ``(base_slices, overlay_slices)`` for a placement.

    The overlay's top-left corner is ``center - size / 2`` rounded half-up to
    the nearest pixel.  Returns ``None`` when nothing overlaps.
    """
    bh, bw = base_shape[:2]
    oh, ow = overlay_shape[:2]
    top = int(math.floor(place.cy - oh / 2.0 + 0.5))
    left = int(math.floor(place.cx - ow / 2.0 + 0.5))
    y0, y1 = max(top, 0), min(top + oh, bh)
    x0, x1 = max(left, 0), min(left + ow, bw)
    if y0 >= y1 or x0 >= x1:
        return None
    return (
        (slice(y0, y1), slice(x0, x1)),
        (slice(y0 - top, y1 - top), slice(x0 - left, x1 - left)),
    )


def paste(base, overlay, alpha, place):
    """Alpha-composite ``overlay`` onto ``base`` centered at ``place``.

    ``out = (1 - alpha) * base + alpha * overlay`` on the overlapping region;
    parts of the overlay outside the base are dropped.
    """
    base = check_image(base, "base")
    overlay = check_image(overlay, "overlay")
    alpha = check_mask(alpha, "alpha")
    if alpha.shape != overlay.shape[:2]:
        raise InvalidParameterError(
            f"alpha shape {alpha.shape} does not match overlay shape {overlay.shape[:2]}"
        )
    if overlay.shape[2] != base.shape[2]:
        raise InvalidParameterError("base and overlay must have the same channel count")
    if not isinstance(place, Placement):
        place = Placement(*place)

    out = base.copy()
    window = overlay_window(base.shape, overlay.shape, place)
    if window is None:
        return out
    (by, bx), (oy, ox) = window
    a = alpha[oy, ox][:, :, None]
    out[by, bx] = (1.0 - a) * base[by, bx] + a * overlay[oy, ox]
    return np.clip(out, 0.0, 1.0)


def to_grayscale(img):
    """ITU-R 601 luma; single-channel images are returned unchanged (as a copy)."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise InvalidParameterError(f"unsupported image shape {arr.shape}")
    if arr.shape[2] == 1:
        return arr.copy()
    return np.clip(arr @ LUMA_WEIGHTS, 0.0, 1.0)[:, :, None]


def to_bytes(img):
    """Encode intensities to uint8, rounding half up."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def quantize(img):
    """Round-trip an image through 8-bit storage."""
    return to_bytes(img).astype(np.float64) / 255.0


def read_png(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"image file not found: {path}")
    with Image.open(path) as im:
        if im.mode in ("L", "I", "I;16", "1"):
            data = np.asarray(im.convert("L"), dtype=np.float64)[:, :, None]
        else:
            data = np.asarray(im.convert("RGB"), dtype=np.float64)
    return data / 255.0


def write_png(path, img):
    data = to_bytes(img)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path, format="PNG")


def encode_png(img):
    """PNG bytes for an image; used by the remote oracle wire format."""
    data = to_bytes(img)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    buf = io.BytesIO()
    Image.fromarray(data).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(blob):
    try:
        with Image.open(io.BytesIO(blob)) as im:
            im.load()
            if im.mode in ("L", "1"):
                data = np.asarray(im.convert("L"), dtype=np.float64)[:, :, None]
            else:
                data = np.asarray(im.convert("RGB"), dtype=np.float64)
    except Exception as exc:  # PIL raises a zoo of exception types
        raise InvalidParameterError(f"cannot decode PNG: {exc}") from exc
    return data / 255.0
