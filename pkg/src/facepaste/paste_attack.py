"""Face pasting attack: candidate rendering, objective and search space."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .bayesopt import BayesianOptimizer, Bounds
from .exceptions import ConfigurationError, InvalidParameterError
from .masks import (
    BIAS_RANGE,
    SIGMA_RANGE,
    SLOPE_RANGE,
    MaskShapeParams,
    auto_mask,
    blur_mask,
    load_mask,
    mask_extent,
    mask_path,
    sigmoid_mask,
)
from .raster import (
    Placement,
    overlay_window,
    quantize,
    resize_bilinear,
    rotate_bilinear,
    rotated_shape,
)

MANUAL = "manual"
AUTO = "auto"
MASK_MODES = (MANUAL, AUTO)
SCALE_RANGE = (0.6, 1.8)
ROTATION_RANGE = (-40.0, 40.0)
STEALTH_THRESHOLD = 0.5

PARAM_NAMES = {
    MANUAL: ("cx", "cy", "sx", "sy", "theta", "bias", "slope"),
    AUTO: ("cx", "cy", "sx", "sy", "theta", "sigma"),
}


def _check_mode(mode):
    if mode not in MASK_MODES:
        raise InvalidParameterError(f"mask_mode must be one of {MASK_MODES}, got {mode!r}")


@dataclass(frozen=True)
class PasteParams:
    """One candidate paste: placement, scale, rotation and mask shape."""

    cx: float
    cy: float
    sx: float = 1.0
    sy: float = 1.0
    theta: float = 0.0
    mask_mode: str = MANUAL
    bias: Optional[float] = None
    slope: Optional[float] = None
    sigma: Optional[float] = None

    def __post_init__(self):
        _check_mode(self.mask_mode)
        for name in ("sx", "sy"):
            v = getattr(self, name)
            if not SCALE_RANGE[0] <= v <= SCALE_RANGE[1]:
                raise InvalidParameterError(f"{name} must be in {SCALE_RANGE}, got {v}")
        if not ROTATION_RANGE[0] <= self.theta <= ROTATION_RANGE[1]:
            raise InvalidParameterError(f"theta must be in {ROTATION_RANGE}, got {self.theta}")
        if not (math.isfinite(self.cx) and math.isfinite(self.cy)):
            raise InvalidParameterError("placement must be finite")
        if self.mask_mode == MANUAL:
            if self.bias is None or self.slope is None or self.sigma is not None:
                raise InvalidParameterError("manual mode needs bias and slope and no sigma")
            MaskShapeParams(self.bias, self.slope)
        else:
            if self.sigma is None or self.bias is not None or self.slope is not None:
                raise InvalidParameterError("auto mode needs sigma and no bias/slope")
            if not SIGMA_RANGE[0] <= self.sigma <= SIGMA_RANGE[1]:
                raise InvalidParameterError(f"sigma must be in {SIGMA_RANGE}, got {self.sigma}")

    def to_vector(self):
        return np.array([getattr(self, n) for n in PARAM_NAMES[self.mask_mode]], dtype=np.float64)

    @classmethod
    def from_vector(cls, vec, mask_mode):
        _check_mode(mask_mode)
        values = {n: float(v) for n, v in zip(PARAM_NAMES[mask_mode], vec)}
        return cls(mask_mode=mask_mode, **values)

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class AttackSpec:
    source_id: int
    target_id: int
    mask_mode: str = MANUAL
    budget: int = 200
    init_queries: int = 50

    def __post_init__(self):
        _check_mode(self.mask_mode)
        if self.source_id == self.target_id:
            raise InvalidParameterError("source and target must differ")
        if not 0 < self.init_queries < self.budget:
            raise InvalidParameterError("require 0 < init_queries < budget")


class MaskBank:
    """Base masks per target class.

    Manual masks come from ``mask_dir`` (``mask_<id>.png``) when given,
    otherwise from the face set's built-in masks.  Automatic masks are
    computed once per class with :func:`auto_mask`.
    """

    def __init__(self, faces, mask_dir=None, auto_options=None):
        self.faces = faces
        self.mask_dir = mask_dir
        self.auto_options = auto_options or {}
        self._cache = {}

    def base(self, target_id, mask_mode):
        key = (target_id, mask_mode)
        if key not in self._cache:
            self._cache[key] = self._load(target_id, mask_mode)
        return self._cache[key]

    def _load(self, target_id, mask_mode):
        _check_mode(mask_mode)
        if mask_mode == AUTO:
            return auto_mask(self.faces[target_id], **self.auto_options)
        if self.mask_dir is not None:
            return load_mask(mask_path(self.mask_dir, target_id), self.faces.shape)
        if self.faces.manual_masks is not None:
            return np.asarray(self.faces.manual_masks[target_id], dtype=np.float64)
        raise ConfigurationError("manual mode needs a mask directory or a face set with built-in masks")

    def face_extent(self, target_id, mask_mode):
        """``(height, width)`` of the target's face region at nominal scale."""
        return mask_extent(self.base(target_id, mask_mode))


def shaped_mask(masks, params, target_id):
    base = masks.base(target_id, params.mask_mode)
    if params.mask_mode == MANUAL:
        return sigmoid_mask(base, MaskShapeParams(params.bias, params.slope))
    return blur_mask(base, params.sigma)


def render(faces, masks, params, source_id, target_id):
    """Paste the target face into the source image according to ``params``.

    The mask is shaped first (sigmoid or blur), then the target image and its
    mask are scaled and rotated together, and finally the pair is
    alpha-composited onto the source centered at ``(cx, cy)``.
    """
    base = faces[source_id]
    overlay = faces[target_id]
    alpha = shaped_mask(masks, params, target_id)
    if params.sx != 1.0 or params.sy != 1.0:
        overlay = resize_bilinear(overlay, params.sx, params.sy)
        alpha = resize_bilinear(alpha, params.sx, params.sy)

    # only the part of the rotated overlay that lands on the base is computed
    canvas = rotated_shape(overlay.shape[0], overlay.shape[1], params.theta)
    place = Placement(params.cx, params.cy)
    out = np.array(base, dtype=np.float64, copy=True)
    window = overlay_window(base.shape, canvas, place)
    if window is None:
        return out
    (by, bx), (oy, ox) = window
    block = (oy.start, oy.stop, ox.start, ox.stop)
    ov, valid = rotate_bilinear(overlay, params.theta, block)
    al, _ = rotate_bilinear(alpha, params.theta, block)
    a = (np.clip(al, 0.0, 1.0) * valid)[:, :, None]
    out[by, bx] = (1.0 - a) * base[by, bx] + a * ov
    return np.clip(out, 0.0, 1.0)


def objective(result):
    """``confidence + min(0.5, stealthiness)``; stealthiness above 0.5 earns nothing."""
    return result.confidence + min(STEALTH_THRESHOLD, result.stealthiness)


def is_success(result, target_id=None):
    """Target is the strict top class and stealthiness is at least 0.5.

    Without a probability vector, ``confidence > 0.5`` stands in for the
    argmax test (a class above one half is necessarily the strict maximum).
    """
    if result.stealthiness < STEALTH_THRESHOLD:
        return False
    if result.probabilities is None:
        return result.confidence > 0.5
    if target_id is None:
        raise InvalidParameterError("target_id is required when probabilities are present")
    p = np.asarray(result.probabilities)
    top = p.max()
    return bool(p[target_id] == top and np.count_nonzero(p == top) == 1)


def default_bounds(image_shape, face_shape, mask_mode):
    """Search box for one attack.

    The paste center may leave the image by half the face size on each side,
    so up to about half of the face can be cropped at an edge.
    """
    _check_mode(mask_mode)
    h, w = image_shape[:2]
    th, tw = face_shape[:2]
    lower = [-0.5 * tw, -0.5 * th, SCALE_RANGE[0], SCALE_RANGE[0], ROTATION_RANGE[0]]
    upper = [w + 0.5 * tw, h + 0.5 * th, SCALE_RANGE[1], SCALE_RANGE[1], ROTATION_RANGE[1]]
    if mask_mode == MANUAL:
        lower += [BIAS_RANGE[0], SLOPE_RANGE[0]]
        upper += [BIAS_RANGE[1], SLOPE_RANGE[1]]
    else:
        lower += [SIGMA_RANGE[0]]
        upper += [SIGMA_RANGE[1]]
    return Bounds(PARAM_NAMES[mask_mode], np.array(lower), np.array(upper))


@dataclass
class Candidate:
    params: PasteParams
    result: object


class FacePasteAttack(BaseEstimator):
    """Query-budgeted Bayesian-optimization paste attack for one class pair.

    Parameters mirror the campaign settings; ``random_state`` seeds both the
    initial design and the candidate sampling.  :meth:`run` returns the
    optimizer's :class:`~facepaste.bayesopt.BoState` whose history payloads
    are :class:`Candidate` objects.
    """

    def __init__(
        self,
        mask_mode=MANUAL,
        budget=200,
        init_queries=50,
        n_uniform=4096,
        n_local=64,
        local_std=0.05,
        random_state=0,
    ):
        self.mask_mode = mask_mode
        self.budget = budget
        self.init_queries = init_queries
        self.n_uniform = n_uniform
        self.n_local = n_local
        self.local_std = local_std
        self.random_state = random_state

    def run(self, oracle, faces, masks, source_id, target_id, listeners=()):
        spec = AttackSpec(source_id, target_id, self.mask_mode, self.budget, self.init_queries)
        bounds = default_bounds(faces.shape, masks.face_extent(target_id, spec.mask_mode), spec.mask_mode)
        session = oracle.session(source_id, target_id, spec.budget, listeners)

        def evaluate(x):
            params = PasteParams.from_vector(bounds.denormalize(x), spec.mask_mode)
            # submissions are 8-bit images, exactly what a remote API receives
            img = quantize(render(faces, masks, params, source_id, target_id))
            result = session.query(img, context=params)
            return objective(result), Candidate(params, result)

        optimizer = BayesianOptimizer(
            n_calls=spec.budget,
            n_initial=spec.init_queries,
            n_uniform=self.n_uniform,
            n_local=self.n_local,
            local_std=self.local_std,
            random_state=self.random_state,
        )
        return optimizer.maximize(evaluate, bounds.dim, bounds)


def optimize(spec, oracle, faces, masks, rng=0, listeners=()):
    """Run one attack described by an :class:`AttackSpec`."""
    attack = FacePasteAttack(spec.mask_mode, spec.budget, spec.init_queries, random_state=rng)
    return attack.run(oracle, faces, masks, spec.source_id, spec.target_id, listeners)
