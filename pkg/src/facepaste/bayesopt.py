"""Gaussian-process Bayesian optimization over a box.

The surrogate is a Matérn 5/2 GP with an isotropic lengthscale whose
hyperparameters are chosen by exhaustive log-marginal-likelihood search on a
fixed grid.  Candidates are scored by expected improvement.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import ndtr
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import FacePasteError, InvalidParameterError

logger = logging.getLogger(__name__)

LENGTHSCALE_GRID = tuple(np.geomspace(0.05, 2.0, 16))
SIGNAL_VARIANCE_GRID = (0.25, 1.0, 4.0)
NOISE_VARIANCE_GRID = (1e-6, 1e-4, 1e-2)
JITTER_START = 1e-8
JITTER_MAX = 1e-4
SIGNAL_VARIANCE_FLOOR = 1e-6
SQRT5 = math.sqrt(5.0)
SQRT2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class Bounds:
    """Named box bounds; maps parameters to and from the unit cube."""

    names: tuple
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=np.float64)
        upper = np.asarray(self.upper, dtype=np.float64)
        if lower.shape != upper.shape or lower.shape != (len(self.names),):
            raise InvalidParameterError("bounds and names must have matching lengths")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper)) and np.all(lower < upper)):
            raise InvalidParameterError("bounds must be finite with lower < upper")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self):
        return len(self.names)

    def normalize(self, params):
        p = np.asarray(params, dtype=np.float64)
        if np.any(p < self.lower) or np.any(p > self.upper):
            raise InvalidParameterError(f"point {p} lies outside the bounds")
        return (p - self.lower) / (self.upper - self.lower)

    def denormalize(self, x):
        x = np.asarray(x, dtype=np.float64)
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise InvalidParameterError(f"point {x} lies outside the unit cube")
        return np.clip(self.lower + x * (self.upper - self.lower), self.lower, self.upper)


def matern52(r):
    """Unit-variance Matérn 5/2 correlation of scaled distances ``r``."""
    s = SQRT5 * np.asarray(r, dtype=np.float64)
    e = np.exp(-s)
    out = s * s
    out *= 1.0 / 3.0
    out += s
    out += 1.0
    out *= e
    return out


def pairwise_distances(A, B):
    """Euclidean distances between the rows of ``A`` and ``B``."""
    sq = np.einsum("ij,ij->i", A, A)[:, None] + np.einsum("ij,ij->i", B, B)[None, :]
    sq -= 2.0 * (A @ B.T)
    np.maximum(sq, 0.0, out=sq)
    return np.sqrt(sq, out=sq)


def _cholesky_with_jitter(K):
    """Cholesky factor of ``K``; on failure retry with jitter 1e-8, 1e-7, ... 1e-4."""
    try:
        return np.linalg.cholesky(K), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_START
    eye = np.eye(K.shape[0])
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise np.linalg.LinAlgError("kernel matrix not positive definite even with maximal jitter")


class _GridFactors:
    """Cholesky factors of ``sf2 * C(ell) + sn2 * I`` for every grid cell.

    Keeps ``L^-1 y`` and ``L^-1 1`` per cell so the log marginal likelihood of
    the standardized targets is available for any mean/scale without another
    solve.  New observations append one row per factor in O(n^2).
    """

    def __init__(self, ells, sf2s, sn2s, d):
        self.ells, self.sf2s, self.sn2s = ells, sf2s, sn2s
        self.cells = [(i, j, k) for i in range(len(ells)) for j in range(len(sf2s)) for k in range(len(sn2s))]
        self.n = 0
        self.cap = 0
        self.d = d
        self._X = np.empty((0, d))
        self._y = np.empty(0)
        self.L = None
        self.u = None
        self.w = None
        self.jitter = np.zeros(len(self.cells))
        self.valid = np.ones(len(self.cells), dtype=bool)

    def _reserve(self, n):
        if n <= self.cap:
            return
        cap = max(n, 2 * self.cap, 16)
        m = len(self.cells)
        L = np.zeros((m, cap, cap))
        u = np.zeros((m, cap))
        w = np.zeros((m, cap))
        X = np.zeros((cap, self.d))
        y = np.zeros(cap)
        if self.L is not None:
            L[:, : self.n, : self.n] = self.L[:, : self.n, : self.n]
            u[:, : self.n] = self.u[:, : self.n]
            w[:, : self.n] = self.w[:, : self.n]
            X[: self.n] = self._X[: self.n]
            y[: self.n] = self._y[: self.n]
        self.L, self.u, self.w, self._X, self._y = L, u, w, X, y
        self.cap = cap

    def _refactor(self, c, corr):
        i, j, k = self.cells[c]
        n = corr.shape[0]
        K = self.sf2s[j] * corr + self.sn2s[k] * np.eye(n)
        try:
            L, jitter = _cholesky_with_jitter(K)
        except np.linalg.LinAlgError:
            self.valid[c] = False
            return
        self.jitter[c] = jitter
        self.L[c, :n, :n] = L
        self.u[c, :n] = solve_triangular(L, self._y[:n], lower=True, check_finite=False)
        self.w[c, :n] = solve_triangular(L, np.ones(n), lower=True, check_finite=False)

    def reset(self, X, y):
        n = X.shape[0]
        self.n = 0
        self.L = None
        self.cap = 0
        self._reserve(n)
        self.n = n
        self._X[:n] = X
        self._y[:n] = y
        self.jitter[:] = 0.0
        self.valid[:] = True
        dist = pairwise_distances(X, X)
        np.fill_diagonal(dist, 0.0)
        eye = np.eye(n)
        ones = np.ones(n)
        per_ell = len(self.sf2s) * len(self.sn2s)
        for i, ell in enumerate(self.ells):
            corr = matern52(dist / ell)
            block = range(i * per_ell, (i + 1) * per_ell)
            stack = np.stack([self.sf2s[self.cells[c][1]] * corr + self.sn2s[self.cells[c][2]] * eye for c in block])
            try:
                chols = np.linalg.cholesky(stack)
            except np.linalg.LinAlgError:
                for c in block:
                    self._refactor(c, corr)
                continue
            for c, L in zip(block, chols):
                self.L[c, :n, :n] = L
                self.u[c, :n] = solve_triangular(L, y, lower=True, check_finite=False)
                self.w[c, :n] = solve_triangular(L, ones, lower=True, check_finite=False)

    def append(self, x, y_new):
        n = self.n
        self._reserve(n + 1)
        Xo = self._X[:n]
        dist = pairwise_distances(x[None, :], Xo)[0]
        self._X[n] = x
        self._y[n] = y_new
        for i, ell in enumerate(self.ells):
            kcol = matern52(dist / ell)
            corr_full = None
            for j, sf2 in enumerate(self.sf2s):
                for k, sn2 in enumerate(self.sn2s):
                    c = (i * len(self.sf2s) + j) * len(self.sn2s) + k
                    if not self.valid[c]:
                        continue
                    L = self.L[c, :n, :n]
                    l = solve_triangular(L, sf2 * kcol, lower=True, check_finite=False)
                    d2 = sf2 + sn2 + self.jitter[c] - l @ l
                    if not d2 > 1e-12 * (sf2 + sn2):
                        # appended row would lose positive definiteness: refactor with jitter
                        if corr_full is None:
                            full = pairwise_distances(self._X[: n + 1], self._X[: n + 1])
                            np.fill_diagonal(full, 0.0)
                            corr_full = matern52(full / ell)
                        self._refactor(c, corr_full)
                        continue
                    dn = math.sqrt(d2)
                    self.L[c, n, :n] = l
                    self.L[c, n, n] = dn
                    self.u[c, n] = (y_new - l @ self.u[c, :n]) / dn
                    self.w[c, n] = (1.0 - l @ self.w[c, :n]) / dn
        self.n = n + 1

    def lml(self, mean, scale):
        n = self.n
        out = np.full((len(self.ells), len(self.sf2s), len(self.sn2s)), -np.inf)
        const = 0.5 * n * math.log(2.0 * math.pi)
        v = (self.u[:, :n] - mean * self.w[:, :n]) / scale
        quad = np.einsum("ij,ij->i", v, v)
        logdet = np.log(np.diagonal(self.L[:, :n, :n], axis1=1, axis2=2)).sum(axis=1)
        vals = -0.5 * quad - logdet - const
        for c, (i, j, k) in enumerate(self.cells):
            if self.valid[c]:
                out[i, j, k] = vals[c]
        return out

    @property
    def X_(self):
        return self._X[: self.n]

    @property
    def y_(self):
        return self._y[: self.n]


class GaussianProcess(RegressorMixin, BaseEstimator):
    """Matérn 5/2 GP regressor on the unit cube with grid-searched hyperparameters.

    Targets are standardized internally; ``signal_variance_`` and
    ``noise_variance_`` are expressed in standardized units while
    :meth:`predict` returns values in the original units.  The predictive
    variance includes the noise term.

    :meth:`partial_fit` adds observations without refactorizing: every grid
    cell's Cholesky factor gains one row, and the hyperparameters are then
    re-selected over the full grid.
    """

    def __init__(
        self,
        lengthscale_grid=LENGTHSCALE_GRID,
        signal_variance_grid=SIGNAL_VARIANCE_GRID,
        noise_variance_grid=NOISE_VARIANCE_GRID,
    ):
        self.lengthscale_grid = lengthscale_grid
        self.signal_variance_grid = signal_variance_grid
        self.noise_variance_grid = noise_variance_grid

    def _grid(self, d):
        ells = np.asarray(self.lengthscale_grid, dtype=np.float64)
        sf2s = np.maximum(np.asarray(self.signal_variance_grid, dtype=np.float64), SIGNAL_VARIANCE_FLOOR)
        sn2s = np.asarray(self.noise_variance_grid, dtype=np.float64)
        if np.any(ells <= 0) or np.any(sn2s < 0):
            raise InvalidParameterError("lengthscales must be positive and noise variances non-negative")
        return _GridFactors(ells, sf2s, sn2s, d)

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        if X.shape[0] < 2:
            raise InvalidParameterError("need at least two observations to fit a GP")
        self.factors_ = self._grid(X.shape[1])
        self.factors_.reset(X, y)
        return self._select()

    def partial_fit(self, X, y):
        """Add observations to an already fitted model (or fit from scratch)."""
        X, y = check_X_y(X, y, y_numeric=True)
        if not hasattr(self, "factors_"):
            return self.fit(X, y)
        for x_new, y_new in zip(X, y):
            self.factors_.append(x_new, float(y_new))
        return self._select()

    def _select(self):
        f = self.factors_
        X, y = f.X_.copy(), f.y_.copy()
        self.X_train_ = X
        self.y_train_ = y
        self.y_mean_ = float(y.mean())
        scale = float(y.std())
        self.y_scale_ = scale if scale > 1e-12 else 1.0

        lml = f.lml(self.y_mean_, self.y_scale_)
        if not np.any(np.isfinite(lml)):
            raise FacePasteError("no hyperparameter setting produced a valid kernel matrix")
        i, j, k = np.unravel_index(int(np.argmax(lml)), lml.shape)
        c = (i * len(f.sf2s) + j) * len(f.sn2s) + k
        self.log_marginal_likelihood_grid_ = lml
        self.log_marginal_likelihood_ = float(lml[i, j, k])
        self.lengthscale_ = float(f.ells[i])
        self.signal_variance_ = float(f.sf2s[j])
        self.noise_variance_ = float(f.sn2s[k])
        self.jitter_ = float(f.jitter[c])

        n = f.n
        self.L_ = f.L[c, :n, :n].copy()
        v = (f.u[c, :n] - self.y_mean_ * f.w[c, :n]) / self.y_scale_
        self.alpha_ = solve_triangular(self.L_, v, lower=True, trans="T", check_finite=False)
        self.L_inv_ = solve_triangular(self.L_, np.eye(n), lower=True, check_finite=False)
        return self

    def cross_covariance(self, X):
        return self.signal_variance_ * matern52(pairwise_distances(X, self.X_train_) / self.lengthscale_)

    def predict(self, X, return_var=False, return_std=False):
        check_is_fitted(self, "alpha_")
        X = check_array(X)
        Ks = self.cross_covariance(X)
        mean = self.y_mean_ + self.y_scale_ * (Ks @ self.alpha_)
        if not (return_var or return_std):
            return mean
        v = self.L_inv_ @ Ks.T
        var_z = self.signal_variance_ + self.noise_variance_ - np.einsum("ij,ij->j", v, v)
        var = np.maximum(var_z, 0.0) * self.y_scale_**2
        return (mean, np.sqrt(var)) if return_std else (mean, var)


def gp_fit(X, y, **grid):
    """Fit a :class:`GaussianProcess` and return it."""
    return GaussianProcess(**grid).fit(X, y)


def gp_predict(model, x):
    """Posterior mean and variance at one point or a batch of points."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    mean, var = model.predict(np.atleast_2d(x), return_var=True)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def expected_improvement(mean, variance, best):
    """Expected improvement of a maximization problem over the incumbent ``best``."""
    mean = np.asarray(mean, dtype=np.float64)
    sigma = np.sqrt(np.maximum(np.asarray(variance, dtype=np.float64), 0.0))
    diff = mean - best
    # huge |z| overflows z * z; exp(-inf) is then the correct 0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        z = np.where(sigma > 0, diff / np.where(sigma > 0, sigma, 1.0), 0.0)
        pdf = np.exp(-0.5 * z * z) / SQRT2PI
        ei = np.where(sigma > 0, diff * ndtr(z) + sigma * pdf, np.maximum(diff, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def suggest_next(model, rng, n_uniform=4096, n_local=64, local_std=0.05):
    """Maximize EI over random candidates in the unit cube.

    Candidates are ``n_uniform`` uniform draws plus ``n_local`` Gaussian
    perturbations of the incumbent (best observed point), clipped to the
    cube.  Falls back to a uniform draw when every EI value is zero.
    """
    d = model.X_train_.shape[1]
    incumbent = model.X_train_[int(np.argmax(model.y_train_))]
    best = float(np.max(model.y_train_))
    uniform = rng.random((n_uniform, d))
    local = np.clip(incumbent + local_std * rng.standard_normal((n_local, d)), 0.0, 1.0)
    cand = np.vstack([uniform, local])
    mean, var = model.predict(cand, return_var=True)
    ei = expected_improvement(mean, var, best)
    if not np.any(ei > 0):
        return rng.random(d)
    return cand[int(np.argmax(ei))]


@dataclass
class Evaluation:
    x: np.ndarray
    value: float
    payload: Any = None


@dataclass
class BoState:
    """History of one optimization run."""

    bounds: Optional[Bounds]
    seed: Any = None
    history: list = field(default_factory=list)
    error: Optional[BaseException] = None

    @property
    def values(self):
        return np.array([e.value for e in self.history])

    @property
    def best_so_far(self):
        return np.maximum.accumulate(self.values) if self.history else np.array([])

    @property
    def best(self):
        if not self.history:
            return None
        return self.history[int(np.argmax(self.values))]


class BayesianOptimizer(BaseEstimator):
    """Budgeted GP-EI maximizer over the unit cube.

    ``func(x)`` receives a point in ``[0, 1]^d`` and returns either a float or
    a ``(float, payload)`` pair.  A :class:`FacePasteError` raised by ``func``
    ends the run; the partial history is returned with ``state.error`` set.
    """

    def __init__(self, n_calls=200, n_initial=50, n_uniform=4096, n_local=64, local_std=0.05, random_state=0):
        self.n_calls = n_calls
        self.n_initial = n_initial
        self.n_uniform = n_uniform
        self.n_local = n_local
        self.local_std = local_std
        self.random_state = random_state

    def _rng(self):
        if isinstance(self.random_state, np.random.Generator):
            return self.random_state
        return np.random.default_rng(self.random_state)

    def maximize(self, func: Callable, dim: int, bounds: Optional[Bounds] = None, callback=None):
        if not 0 < self.n_initial < self.n_calls:
            raise InvalidParameterError("require 0 < n_initial < n_calls")
        rng = self._rng()
        state = BoState(bounds=bounds, seed=self.random_state)
        X, y = [], []
        model = None
        for i in range(self.n_calls):
            if i < self.n_initial:
                x = rng.random(dim)
            else:
                if model is None:
                    model = GaussianProcess().fit(np.array(X), np.array(y))
                else:
                    model.partial_fit(X[-1][None, :], [y[-1]])
                x = suggest_next(model, rng, self.n_uniform, self.n_local, self.local_std)
            try:
                out = func(x)
            except FacePasteError as exc:
                logger.warning("optimization stopped after %d evaluations: %s", i, exc)
                state.error = exc
                break
            value, payload = out if isinstance(out, tuple) else (out, None)
            value = float(value)
            X.append(np.asarray(x, dtype=np.float64))
            y.append(value)
            state.history.append(Evaluation(x=X[-1], value=value, payload=payload))
            if callback is not None:
                callback(state)
        return state
