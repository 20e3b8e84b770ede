"""Slow, loop-based SSIM used as a test oracle.

Written from the textbook definition without sharing code with the package:
an explicit 2-D Gaussian window is slid over every fully-contained position.
"""

import math

import numpy as np


def gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    w = np.empty((size, size))
    for i in range(size):
        for j in range(size):
            w[i, j] = math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma * sigma))
    return w / w.sum()


def ssim_channel(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03, L=1.0):
    w = gaussian_window(size, sigma)
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    h, wd = a.shape
    vals = []
    for r in range(h - size + 1):
        for c in range(wd - size + 1):
            pa = a[r : r + size, c : c + size]
            pb = b[r : r + size, c : c + size]
            mu_a = (w * pa).sum()
            mu_b = (w * pb).sum()
            var_a = (w * (pa - mu_a) ** 2).sum()
            var_b = (w * (pb - mu_b) ** 2).sum()
            cov = (w * (pa - mu_a) * (pb - mu_b)).sum()
            vals.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
            )
    return float(np.mean(vals))


def ssim_reference(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    score = np.mean([ssim_channel(a[:, :, ch], b[:, :, ch]) for ch in range(a.shape[2])])
    return min(max(score, 0.0), 1.0)
