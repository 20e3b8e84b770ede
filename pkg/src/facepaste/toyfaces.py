"""Deterministic synthetic portraits used as the default face set.

Each class gets a seeded procedural face: a skin-toned ellipse over a shared
background, with class-specific hair, eyes, brows, nose and mouth geometry
plus optional beard and glasses.  Everything outside the face is nearly
identical across classes, so identity lives inside the face region (as it
does for a recognizer looking at real portraits).  The whole portrait is
blurred, which keeps class templates similar under small misalignments.  Alongside every face the generator produces a
continuous "manual" mask (face region with raised feature bands) and the
face bounding box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

N_CLASSES = 10
IMAGE_SIZE = 128
# mask level inside the face, and a lower halo MARGIN pixels beyond it
MASK_FACE = 0.85
MARGIN = 12.0
MARGIN_LEVEL = 0.45
# final Gaussian blur; identity survives it, pixel-exact alignment does not matter as much
BLUR = 5.0
# per-class skin luma offset scale (see LUMA_OFFSETS)
SPREAD = 0.3
FRINGE = 0.2
BOX_MARGIN = 1.25
LUMA = np.array([0.299, 0.587, 0.114])

SKIN_HUES = np.array(
    [
        [1.00, 0.80, 0.68],
        [1.00, 0.72, 0.55],
        [0.95, 0.78, 0.70],
        [1.00, 0.76, 0.62],
        [0.92, 0.80, 0.66],
        [1.00, 0.70, 0.60],
        [0.98, 0.82, 0.62],
        [0.94, 0.74, 0.64],
        [1.00, 0.78, 0.58],
        [0.96, 0.76, 0.72],
    ]
)
SKIN_LUMA = 0.62
HAIR_HUES = np.array(
    [
        [0.30, 0.22, 0.15],
        [0.20, 0.16, 0.14],
        [0.35, 0.25, 0.12],
        [0.22, 0.22, 0.24],
        [0.36, 0.18, 0.10],
        [0.26, 0.20, 0.16],
        [0.30, 0.28, 0.26],
        [0.28, 0.19, 0.12],
        [0.24, 0.18, 0.18],
        [0.18, 0.18, 0.22],
    ]
)
HAIR_LUMA = 0.12
BACKGROUND_TOP = np.array([0.42, 0.45, 0.50])
BACKGROUND_BOTTOM = np.array([0.34, 0.36, 0.40])
SHIRT = np.array([0.30, 0.34, 0.42])

# class archetypes: every class carries a few strong, large-scale traits on a
# shared vertical layout; the seed only jitters geometry around them
ARCHETYPES = (
    {"fringe": 0.20},
    {"fringe": 0.55, "glasses": "round", "brows": 0.6},
    {"fringe": 0.30, "beard": "full", "brows": 1.4},
    {"fringe": 0.12, "beard": "mustache", "glasses": "shades"},
    {"fringe": 0.45, "brows": 2.0},
    {"fringe": 0.25, "beard": "goatee", "glasses": "round", "brows": 0.8},
    {"fringe": 0.60, "beard": "full", "brows": 0.6},
    {"fringe": 0.10, "glasses": "shades", "brows": 1.6},
    {"fringe": 0.38, "beard": "mustache", "brows": 1.2},
    {"fringe": 0.18, "glasses": "round", "brows": 2.2},
)
LUMA_OFFSETS = (0.0, 0.5, -0.5, 1.0, -1.0, 0.25, -0.75, 0.75, -0.25, 0.0)


@dataclass(frozen=True)
class ToyFace:
    image: np.ndarray
    manual_mask: np.ndarray
    face_box: tuple  # (top, left, height, width)


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    dx, dy = xx - cx, yy - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _soft(region, sigma):
    return np.clip(ndimage.gaussian_filter(region.astype(np.float64), sigma), 0.0, 1.0)


def _paint(img, region, color, sigma=0.7):
    a = _soft(region, sigma)[:, :, None]
    img *= 1.0 - a
    img += a * np.asarray(color)


def _with_luma(hue, luma):
    return np.clip(hue * (luma / float(hue @ LUMA)), 0.0, 1.0)


def make_face(class_id, seed=0, size=IMAGE_SIZE):
    """Render one deterministic toy portrait and its manual mask."""
    rng = np.random.default_rng([seed, class_id])
    traits = ARCHETYPES[class_id % len(ARCHETYPES)]
    beard = traits.get("beard")
    glasses = traits.get("glasses")
    brow_weight = traits.get("brows", 1.0)
    fringe_depth = traits.get("fringe", FRINGE)
    n = size
    k = n / 128.0
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)

    t = (yy / (n - 1))[:, :, None]
    img = ((1 - t) * BACKGROUND_TOP + t * BACKGROUND_BOTTOM).copy()

    skin = _with_luma(
        SKIN_HUES[class_id % len(SKIN_HUES)], SKIN_LUMA + SPREAD * LUMA_OFFSETS[class_id % len(LUMA_OFFSETS)] + rng.normal(0, 0.01)
    )
    hair = _with_luma(HAIR_HUES[class_id % len(HAIR_HUES)], HAIR_LUMA + rng.normal(0, 0.01))

    cx = n / 2 - 0.5 + rng.uniform(-1.5, 1.5) * k
    cy = 64 * k + rng.uniform(-1.5, 1.5) * k
    rx = rng.uniform(29, 32) * k
    ry = rng.uniform(39, 42) * k

    neck = (np.abs(xx - cx) < 0.45 * rx) & (yy > cy + 0.6 * ry)
    _paint(img, neck, skin * 0.85)
    _paint(img, _ellipse(yy, xx, n + 10 * k, cx, 24 * k, 60 * k), SHIRT)

    face = _ellipse(yy, xx, cy, cx, ry, rx)
    _paint(img, face, skin)

    # fringe: hair reaching into the forehead, optionally parted to one side
    part = rng.uniform(-0.5, 0.5) * rx
    edge = cy - ry + 2.0 * fringe_depth * ry * (1.0 - 0.35 * ((xx - cx - part) / rx) ** 2)
    _paint(img, face & (yy < edge), hair, 1.0)

    eye_y = cy - rng.uniform(0.08, 0.18) * ry
    eye_dx = rng.uniform(0.36, 0.46) * rx
    eye_rx = rng.uniform(5.0, 6.5) * k
    eye_ry = rng.uniform(2.5, 3.5) * k
    iris = _with_luma(np.clip(rng.uniform(0.2, 0.6, 3), 0.05, 1.0), 0.15)
    brow_dy = rng.uniform(7, 10) * k
    brow_tilt = rng.uniform(-0.25, 0.25)
    brow_th = brow_weight * 1.6 * k
    feature_band = np.zeros((n, n), dtype=bool)
    for side in (-1, 1):
        ex = cx + side * eye_dx
        _paint(img, _ellipse(yy, xx, eye_y, ex, eye_ry, eye_rx), [0.93, 0.93, 0.91], 0.5)
        _paint(img, _ellipse(yy, xx, eye_y, ex, eye_ry, eye_ry), iris, 0.5)
        brow = _ellipse(yy, xx, eye_y - brow_dy, ex, brow_th, eye_rx * 1.4, side * brow_tilt)
        _paint(img, brow, hair, 0.6)
        feature_band |= _ellipse(yy, xx, eye_y - brow_dy / 2, ex, eye_ry + brow_dy, eye_rx * 1.8)
        if glasses is not None:
            lens = _ellipse(yy, xx, eye_y, ex, eye_rx * 1.15, eye_rx * 1.5)
            if glasses == "shades":
                _paint(img, lens, [0.06, 0.06, 0.08], 0.6)
            else:
                inner = _ellipse(yy, xx, eye_y, ex, eye_rx * 1.15 - 1.8 * k, eye_rx * 1.5 - 1.8 * k)
                _paint(img, lens & ~inner, [0.08, 0.08, 0.08], 0.5)
    if glasses is not None:
        bridge = (np.abs(yy - eye_y) < 1.0 * k) & (np.abs(xx - cx) < eye_dx - eye_rx * 1.3)
        _paint(img, bridge, [0.08, 0.08, 0.08], 0.5)

    nose_len = rng.uniform(10, 15) * k
    nose_w = rng.uniform(3.0, 4.5) * k
    nose_top = eye_y + 4 * k
    _paint(img, _ellipse(yy, xx, nose_top + nose_len, cx, nose_w * 0.9, nose_w * 1.6), skin * 0.7, 0.8)
    ridge = (np.abs(xx - cx) < 0.9 * k) & (yy > nose_top) & (yy < nose_top + nose_len)
    _paint(img, ridge, skin * 0.85, 0.8)
    feature_band |= _ellipse(yy, xx, nose_top + nose_len / 2, cx, nose_len / 2 + 3 * k, nose_w * 2.5)

    mouth_y = cy + rng.uniform(0.50, 0.60) * ry
    mouth_rx = rng.uniform(8, 13) * k
    mouth_ry = rng.uniform(2.0, 3.5) * k
    if beard == "full":
        jaw = face & (yy > cy + 0.15 * ry) & ~_ellipse(yy, xx, mouth_y, cx, mouth_ry + 2 * k, mouth_rx + 1 * k)
        _paint(img, jaw, hair, 1.2)
    elif beard == "goatee":
        _paint(img, face & _ellipse(yy, xx, cy + 0.82 * ry, cx, 0.22 * ry, 0.35 * rx), hair, 1.0)
    if beard in ("mustache", "full", "goatee"):
        _paint(img, _ellipse(yy, xx, mouth_y - mouth_ry - 3 * k, cx, 2.5 * k, mouth_rx * 1.1), hair, 0.8)
    lips = _with_luma(np.array([0.80, 0.35, 0.35]), 0.40 + rng.normal(0, 0.02))
    _paint(img, _ellipse(yy, xx, mouth_y, cx, mouth_ry, mouth_rx), lips, 0.6)
    feature_band |= _ellipse(yy, xx, mouth_y, cx, mouth_ry + 5 * k, mouth_rx + 4 * k)

    img = ndimage.gaussian_filter(img, (BLUR * k, BLUR * k, 0))
    img = np.clip(img, 0.02, 0.98)

    mask = MASK_FACE * _soft(face, 2.0 * k)
    if MARGIN:
        halo = _ellipse(yy, xx, cy, cx, ry + MARGIN * k, rx + MARGIN * k)
        mask = np.maximum(mask, MARGIN_LEVEL * _soft(halo, 3.0 * k))
    mask = np.maximum(mask, 0.95 * _soft(feature_band & face, 1.5 * k))

    # square crop with a margin around the face, like a face detector's output
    half = 0.5 * BOX_MARGIN * 2.0 * max(rx, ry)
    top = max(int(np.floor(cy - half)), 0)
    left = max(int(np.floor(cx - half)), 0)
    bottom = min(int(np.ceil(cy + half)), n)
    right = min(int(np.ceil(cx + half)), n)
    box = (top, left, bottom - top, right - left)
    return ToyFace(image=img, manual_mask=np.clip(mask, 0.0, 1.0), face_box=box)


def make_face_set(seed=0, size=IMAGE_SIZE, n_classes=N_CLASSES):
    """Return the list of ``n_classes`` toy faces for ``seed``."""
    return [make_face(c, seed=seed, size=size) for c in range(n_classes)]
