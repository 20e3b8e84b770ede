"""Naive GP posterior via an explicit matrix inverse, used as a test oracle."""

import math

import numpy as np


def matern52_kernel(A, B, ell, sf2):
    K = np.empty((len(A), len(B)))
    for i, a in enumerate(A):
        for j, b in enumerate(B):
            r = math.sqrt(float(np.sum((a - b) ** 2))) / ell
            K[i, j] = sf2 * (1 + math.sqrt(5) * r + 5.0 * r * r / 3.0) * math.exp(-math.sqrt(5) * r)
    return K


def posterior(X, y, Xs, ell, sf2, sn2, jitter=0.0):
    """Mean and variance (noise included) with y standardized by its mean/std."""
    mu = y.mean()
    sd = y.std()
    sd = sd if sd > 1e-12 else 1.0
    z = (y - mu) / sd
    K = matern52_kernel(X, X, ell, sf2) + (sn2 + jitter) * np.eye(len(X))
    Kinv = np.linalg.inv(K)
    Ks = matern52_kernel(Xs, X, ell, sf2)
    mean = mu + sd * Ks @ Kinv @ z
    var = sf2 + sn2 - np.einsum("ij,jk,ik->i", Ks, Kinv, Ks)
    return mean, np.maximum(var, 0) * sd * sd


def log_marginal_likelihood(X, y, ell, sf2, sn2):
    mu = y.mean()
    sd = y.std()
    sd = sd if sd > 1e-12 else 1.0
    z = (y - mu) / sd
    K = matern52_kernel(X, X, ell, sf2) + sn2 * np.eye(len(X))
    sign, logdet = np.linalg.slogdet(K)
    return float(-0.5 * z @ np.linalg.solve(K, z) - 0.5 * logdet - 0.5 * len(X) * math.log(2 * math.pi))
