"""SSIM stealthiness score."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from .exceptions import InvalidParameterError


@dataclass(frozen=True)
class SsimConfig:
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise InvalidParameterError("window_size must be a positive odd integer")
        if self.k1 <= 0 or self.k2 <= 0 or self.window_sigma <= 0:
            raise InvalidParameterError("k1, k2 and window_sigma must be positive")

    @property
    def c1(self):
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.data_range) ** 2

    def window1d(self):
        x = np.arange(self.window_size, dtype=np.float64) - (self.window_size - 1) / 2.0
        g = np.exp(-0.5 * (x / self.window_sigma) ** 2)
        return g / g.sum()


DEFAULT_SSIM = SsimConfig()


@lru_cache(maxsize=64)
def _band_matrix(n, window):
    # (n - len + 1, n) matrix whose rows are the shifted window: a valid correlation
    k = len(window)
    mat = np.zeros((n - k + 1, n))
    for i in range(n - k + 1):
        mat[i, i : i + k] = window
    mat.setflags(write=False)
    return mat


def _moments(a, b, cfg):
    """Local means, variances and covariance of ``(H, W, C)`` stacks."""
    h, w, c = a.shape
    g = tuple(cfg.window1d())
    gy = _band_matrix(h, g)
    gx = _band_matrix(w, g)
    stack = np.concatenate([a, b, a * a, b * b, a * b], axis=2)
    tmp = (gy @ stack.reshape(h, -1)).reshape(gy.shape[0], w, -1)
    out = np.matmul(tmp.transpose(0, 2, 1), gx.T).transpose(0, 2, 1)
    mu_a, mu_b, e_aa, e_bb, e_ab = np.split(out, 5, axis=2)
    return mu_a, mu_b, e_aa - mu_a * mu_a, e_bb - mu_b * mu_b, e_ab - mu_a * mu_b


def ssim_map(a, b, cfg=DEFAULT_SSIM):
    """Per-window, per-channel SSIM of ``(H, W, C)`` arrays (valid windows only)."""
    mu_a, mu_b, var_a, var_b, cov = _moments(a, b, cfg)
    c1, c2 = cfg.c1, cfg.c2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, cfg=DEFAULT_SSIM):
    """Mean SSIM between two images, averaged over channels and clamped to [0, 1].

    Images are ``(H, W)`` or ``(H, W, C)`` arrays and must have identical
    shapes.  Both spatial sides must be at least ``cfg.window_size``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.ndim != 3 or min(a.shape[:2]) < cfg.window_size:
        raise InvalidParameterError(
            f"images must be at least {cfg.window_size}x{cfg.window_size}, got {a.shape}"
        )
    per_channel = ssim_map(a, b, cfg).mean(axis=(0, 1))
    return float(np.clip(per_channel.mean(), 0.0, 1.0))


class SsimScorer:
    """SSIM against a fixed reference image, restricted to the changed area.

    Windows where the candidate equals the reference score exactly 1, so only
    the bounding box of changed pixels, grown by the window size, is
    evaluated.  Agrees with :func:`ssim` up to floating-point rounding.
    """

    def __init__(self, reference, cfg=DEFAULT_SSIM):
        ref = np.asarray(reference, dtype=np.float64)
        if ref.ndim == 2:
            ref = ref[:, :, None]
        if min(ref.shape[:2]) < cfg.window_size:
            raise InvalidParameterError("reference image is smaller than the SSIM window")
        self.reference = ref
        self.cfg = cfg

    def __call__(self, img):
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 2:
            img = img[:, :, None]
        ref = self.reference
        if img.shape != ref.shape:
            raise InvalidParameterError(f"shape mismatch: {img.shape} vs {ref.shape}")
        changed = np.any(img != ref, axis=2)
        rows = np.flatnonzero(changed.any(axis=1))
        if rows.size == 0:
            return 1.0
        cols = np.flatnonzero(changed.any(axis=0))
        k = self.cfg.window_size
        h, w = changed.shape
        n_rows, n_cols = h - k + 1, w - k + 1
        # window i covers pixels [i, i + k); it is affected iff it meets a changed pixel
        r0, r1 = max(rows[0] - k + 1, 0), min(rows[-1], n_rows - 1)
        c0, c1 = max(cols[0] - k + 1, 0), min(cols[-1], n_cols - 1)
        sub = (slice(r0, r1 + k), slice(c0, c1 + k))
        local = ssim_map(img[sub], ref[sub], self.cfg)
        n_windows = n_rows * n_cols
        n_local = local.shape[0] * local.shape[1]
        per_channel = (local.sum(axis=(0, 1)) + (n_windows - n_local)) / n_windows
        return float(np.clip(per_channel.mean(), 0.0, 1.0))
