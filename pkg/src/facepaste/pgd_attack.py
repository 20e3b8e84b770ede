"""White-box PGD on a differentiable surrogate, held at a fixed SSIM.

The face crop is scaled to a square working resolution, perturbed with
sign-gradient steps on ``log p[target]``, and the accumulated perturbation
is mapped back to the crop box with bilinear interpolation.  Finally the
perturbation is shrunk toward the source until the stealthiness sits just
above the floor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import InvalidParameterError, UnsupportedOperationError
from .oracle import QueryResult
from .raster import check_image, interp_matrix
from .similarity import DEFAULT_SSIM, SsimScorer

PROJECTION_ITERATIONS = 30


@dataclass(frozen=True)
class PgdConfig:
    step_size: float = 2.0 / 255.0
    steps: int = 100
    ssim_floor: float = 0.5
    ssim_tolerance: float = 0.005
    crop_size: int = 160
    project_each_step: bool = False

    def __post_init__(self):
        if not self.step_size > 0:
            raise InvalidParameterError("step_size must be positive")
        if self.steps < 0:
            raise InvalidParameterError("steps must be non-negative")
        if not 0 < self.ssim_floor < 1:
            raise InvalidParameterError("ssim_floor must lie in (0, 1)")
        if self.crop_size < 1:
            raise InvalidParameterError("crop_size must be positive")


def pgd_step(x, grad, step_size):
    """One signed ascent step, clipped to the valid intensity range."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if x.shape != grad.shape:
        raise InvalidParameterError(f"shape mismatch: {x.shape} vs {grad.shape}")
    return np.clip(x + step_size * np.sign(grad), 0.0, 1.0)


def ssim_project(x0, x, floor=0.5, tol=0.005, cfg=DEFAULT_SSIM, scorer=None):
    """Shrink ``x`` toward ``x0`` until SSIM is just above ``floor``.

    Returns ``(image, lam)`` where ``image = x0 + lam * (x - x0)`` and
    ``lam`` is the largest value found by bisection with SSIM >= floor.
    When ``x`` already satisfies the floor it is returned with ``lam = 1``.
    ``tol`` is not used to stop early: 30 bisection steps resolve ``lam`` far
    more finely than any SSIM tolerance of practical size.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x0.shape != x.shape:
        raise InvalidParameterError(f"shape mismatch: {x0.shape} vs {x.shape}")
    score = scorer if scorer is not None else SsimScorer(x0, cfg)
    if score(x) >= floor:
        return x.copy(), 1.0
    delta = x - x0
    lo, hi = 0.0, 1.0
    for _ in range(PROJECTION_ITERATIONS):
        mid = 0.5 * (lo + hi)
        if score(x0 + mid * delta) >= floor:
            lo = mid
        else:
            hi = mid
    return x0 + lo * delta, lo


def _sandwich(a, img, b):
    """``a @ img[:, :, c] @ b.T`` for every channel ``c``."""
    tmp = np.tensordot(a, img, axes=(1, 0))  # (rows, cols, channels)
    return np.matmul(tmp.transpose(0, 2, 1), b.T).transpose(0, 2, 1)


def _box(crop_box, shape):
    h, w = shape[:2]
    if crop_box is None:
        return 0, 0, h, w
    top, left, bh, bw = (int(v) for v in crop_box)
    if bh < 1 or bw < 1 or top < 0 or left < 0 or top + bh > h or left + bw > w:
        raise InvalidParameterError(f"crop box {crop_box} does not fit an image of shape {shape}")
    return top, left, bh, bw


@dataclass
class PgdResult:
    image: np.ndarray
    trace: list  # (confidence, ssim) after every step, surrogate-side
    final: QueryResult  # surrogate scores of the projected image
    projection_scale: float
    transfer: Optional[QueryResult] = None
    source_id: int = 0
    target_id: int = 0
    log_confidence: list = field(default_factory=list)

    @property
    def success(self):
        p = self.final.probabilities
        return bool(p is not None and int(np.argmax(p)) == self.target_id and self.final.stealthiness >= 0.5)


def run_pgd(source_id, target_id, oracle, cfg=PgdConfig(), crop_box=None, eval_oracle=None):
    """PGD attack of ``source_id`` toward ``target_id`` using ``oracle``'s gradients.

    ``crop_box`` is ``(top, left, height, width)`` in source coordinates and
    defaults to the face set's box for the source class (or the whole image).
    ``eval_oracle``, when given, scores the final image a second time; this is
    the transfer measurement.
    """
    faces = getattr(oracle, "faces", None)
    if faces is None or not hasattr(oracle, "classify"):
        raise UnsupportedOperationError(f"{type(oracle).__name__} cannot serve as a gradient surrogate")
    oracle._check_ids(source_id, target_id)
    x0 = check_image(faces[source_id])
    if crop_box is None and faces.face_boxes is not None:
        crop_box = faces.face_boxes[source_id]
    top, left, bh, bw = _box(crop_box, x0.shape)
    n = cfg.crop_size
    uy = interp_matrix(n, bh)  # working grid -> crop box
    ux = interp_matrix(n, bw)
    dy = interp_matrix(bh, n)  # crop box -> working grid
    dx = interp_matrix(bw, n)
    rows, cols = slice(top, top + bh), slice(left, left + bw)

    crop = _sandwich(dy, x0[rows, cols], dx)
    work = crop.copy()
    scorer = SsimScorer(x0, getattr(oracle, "ssim_cfg", DEFAULT_SSIM))

    def compose(w):
        out = x0.copy()
        out[rows, cols] += _sandwich(uy, w - crop, ux)
        return np.clip(out, 0.0, 1.0)

    trace, logs = [], []
    x = x0.copy()
    for _ in range(cfg.steps):
        g = oracle.gradient_log_confidence(x, target_id)[rows, cols]
        g_work = _sandwich(uy.T, g, ux.T)
        work = pgd_step(work, g_work, cfg.step_size)
        x = compose(work)
        if cfg.project_each_step:
            x, lam = ssim_project(x0, x, cfg.ssim_floor, cfg.ssim_tolerance, scorer=scorer)
            work = crop + lam * (work - crop)
        p = oracle.classify(x)
        trace.append((float(p[target_id]), scorer(x)))
        logs.append(float(np.log(p[target_id])))

    x, lam = ssim_project(x0, x, cfg.ssim_floor, cfg.ssim_tolerance, scorer=scorer)
    final = oracle.query(x, source_id, target_id)
    transfer = eval_oracle.query(x, source_id, target_id) if eval_oracle is not None else None
    return PgdResult(x, trace, final, lam, transfer, source_id, target_id, logs)


class PGDAttack(BaseEstimator):
    """Estimator wrapper around :func:`run_pgd` for batches of class pairs."""

    def __init__(self, step_size=2.0 / 255.0, steps=100, ssim_floor=0.5, ssim_tolerance=0.005,
                 crop_size=160, project_each_step=False):
        self.step_size = step_size
        self.steps = steps
        self.ssim_floor = ssim_floor
        self.ssim_tolerance = ssim_tolerance
        self.crop_size = crop_size
        self.project_each_step = project_each_step

    def config(self):
        return PgdConfig(self.step_size, self.steps, self.ssim_floor, self.ssim_tolerance,
                         self.crop_size, self.project_each_step)

    def run(self, oracle, pairs, eval_oracle=None, crop_boxes=None):
        cfg = self.config()
        boxes = crop_boxes or {}
        return [run_pgd(s, t, oracle, cfg, boxes.get(s), eval_oracle) for s, t in pairs]
