"""Black-box scoring oracles.

An oracle maps ``(image, source_id, target_id)`` to a :class:`QueryResult`
holding the target-class confidence and the stealthiness (SSIM against the
unaltered source).  Two implementations share the interface:

* :class:`SimulatedOracle` - an in-process template-matching face
  recognizer, deterministic and analytically differentiable;
* :class:`RemoteOracle` - a JSON-over-HTTP client.

Budgets are enforced per attack by :class:`AttackSession`, obtained from
:meth:`Oracle.session`.  :func:`make_server` exposes any oracle over the
same HTTP contract the remote client speaks.
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import requests
from scipy.special import softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import (
    BudgetExhaustedError,
    ConfigurationError,
    FacePasteError,
    InvalidParameterError,
    TransportError,
    UnsupportedOperationError,
)
from .raster import LUMA_WEIGHTS, check_image, decode_png, encode_png, interp_matrix, read_png, to_grayscale
from .similarity import DEFAULT_SSIM, SsimScorer

logger = logging.getLogger(__name__)

API_KEY_ENV = "FACEPASTE_API_KEY"
N_CLASSES = 10


@dataclass(frozen=True)
class QueryResult:
    confidence: float
    stealthiness: float
    probabilities: Optional[tuple] = None
    query_index: int = 0

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0 and 0.0 <= self.stealthiness <= 1.0):
            raise InvalidParameterError(
                f"scores must lie in [0, 1], got confidence={self.confidence}, stealthiness={self.stealthiness}"
            )
        if self.probabilities is not None:
            p = np.asarray(self.probabilities, dtype=np.float64)
            if np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > 1e-9:
                raise InvalidParameterError("probabilities must lie in [0, 1] and sum to 1")
            object.__setattr__(self, "probabilities", tuple(float(v) for v in p))


class FaceSet:
    """The reference faces, one per class, all with the same shape.

    ``face_boxes`` optionally holds ``(top, left, height, width)`` face
    rectangles; ``manual_masks`` optionally holds continuous masks.
    """

    def __init__(self, images, face_boxes=None, manual_masks=None):
        images = [check_image(im, f"face {i}") for i, im in enumerate(images)]
        if len(images) != N_CLASSES:
            raise InvalidParameterError(f"a face set needs exactly {N_CLASSES} images, got {len(images)}")
        shapes = {im.shape for im in images}
        if len(shapes) != 1:
            raise InvalidParameterError(f"face images must share one shape, got {sorted(shapes)}")
        self.images = images
        self.face_boxes = list(face_boxes) if face_boxes is not None else None
        self.manual_masks = list(manual_masks) if manual_masks is not None else None

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i]

    @property
    def shape(self):
        return self.images[0].shape

    @classmethod
    def toy(cls, seed=0):
        """The deterministic synthetic face set, stored at 8-bit precision."""
        from .raster import quantize
        from .toyfaces import make_face_set

        faces = make_face_set(seed=seed)
        return cls(
            [quantize(f.image) for f in faces],
            face_boxes=[f.face_box for f in faces],
            manual_masks=[quantize(f.manual_mask) for f in faces],
        )

    @classmethod
    def from_dir(cls, directory):
        """Load ``face_0.png`` ... ``face_9.png`` from ``directory``."""
        directory = Path(directory)
        paths = [directory / f"face_{i}.png" for i in range(N_CLASSES)]
        missing = [p.name for p in paths if not p.is_file()]
        if missing:
            raise ConfigurationError(f"missing face images in {directory}: {', '.join(missing)}")
        boxes = None
        box_file = directory / "face_boxes.json"
        if box_file.is_file():
            boxes = [tuple(b) for b in json.loads(box_file.read_text())]
        return cls([read_png(p) for p in paths], face_boxes=boxes)


@dataclass(frozen=True)
class SimOracleConfig:
    embed_size: int = 64
    temperature: float = 20.0

    def __post_init__(self):
        if self.embed_size < 8:
            raise InvalidParameterError("embed_size must be at least 8")
        if not self.temperature > 0:
            raise InvalidParameterError("temperature must be positive")


class TemplateFaceClassifier(ClassifierMixin, BaseEstimator):
    """Cosine-similarity template matcher over downsampled grayscale images.

    ``fit`` stores one unit-norm embedding per class; ``predict_proba``
    returns ``softmax(temperature * cosine)``.
    """

    def __init__(self, embed_size=64, temperature=20.0):
        self.embed_size = embed_size
        self.temperature = temperature

    def _embed(self, img):
        gray = to_grayscale(img)[:, :, 0]
        ry = interp_matrix(gray.shape[0], self.embed_size)
        rx = interp_matrix(gray.shape[1], self.embed_size)
        d = (ry @ gray @ rx.T).ravel()
        norm = np.linalg.norm(d)
        return d / max(norm, 1e-12), d, norm

    def fit(self, X, y=None):
        SimOracleConfig(self.embed_size, self.temperature)
        X = list(X)
        self.classes_ = np.arange(len(X)) if y is None else np.asarray(y)
        self.image_shape_ = np.asarray(X[0]).shape
        self.templates_ = np.array([self._embed(x)[0] for x in X])
        return self

    def scores(self, img):
        check_is_fitted(self, "templates_")
        return self.templates_ @ self._embed(img)[0]

    def class_probabilities(self, img):
        return softmax(self.temperature * self.scores(img))

    def predict_proba(self, X):
        return np.array([self.class_probabilities(x) for x in X])

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def gradient_log_proba(self, img, target):
        """Gradient of ``log p[target]`` with respect to every input pixel."""
        check_is_fitted(self, "templates_")
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 2:
            img = img[:, :, None]
        e, _, norm = self._embed(img)
        p = softmax(self.temperature * (self.templates_ @ e))
        onehot = np.zeros_like(p)
        onehot[target] = 1.0
        g_s = self.temperature * (onehot - p)
        g_e = self.templates_.T @ g_s
        g_d = (g_e - e * (e @ g_e)) / max(norm, 1e-12)
        k = self.embed_size
        ry = interp_matrix(img.shape[0], k)
        rx = interp_matrix(img.shape[1], k)
        g_gray = ry.T @ g_d.reshape(k, k) @ rx
        if img.shape[2] == 1:
            return g_gray[:, :, None]
        # the grayscale conversion clips at 1; the luma weights sum to 1 so it never binds
        return g_gray[:, :, None] * LUMA_WEIGHTS


class Oracle:
    """Common interface of all oracles.

    Subclasses implement :meth:`query`; :meth:`session` wraps it with a
    per-attack budget and an optional query log.
    """

    n_classes = N_CLASSES

    def query(self, img, source_id, target_id) -> QueryResult:  # pragma: no cover - interface
        raise NotImplementedError

    def gradient_log_confidence(self, img, target_id):
        raise UnsupportedOperationError(f"{type(self).__name__} does not expose gradients")

    def _check_ids(self, source_id, target_id):
        for name, v in (("source_id", source_id), ("target_id", target_id)):
            if not (isinstance(v, (int, np.integer)) and 0 <= v < self.n_classes):
                raise InvalidParameterError(f"{name} must be a class id in [0, {self.n_classes}), got {v!r}")
        if source_id == target_id:
            raise InvalidParameterError("source_id and target_id must differ")

    def session(self, source_id, target_id, budget=None, listeners=()):
        self._check_ids(source_id, target_id)
        return AttackSession(self, source_id, target_id, budget, list(listeners))


@dataclass
class AttackSession:
    """Budgeted, logged access to an oracle for one ``source -> target`` attack.

    Every listener is called with ``(result, context)`` after a successful
    query and before :meth:`query` returns; the runner uses this to persist
    each query immediately.
    """

    oracle: Oracle
    source_id: int
    target_id: int
    budget: Optional[int] = None
    listeners: list = field(default_factory=list)
    queries_used: int = 0

    def __post_init__(self):
        self._lock = threading.Lock()

    @property
    def remaining(self):
        return None if self.budget is None else self.budget - self.queries_used

    def query(self, img, context=None):
        # one request in flight per attack
        with self._lock:
            if self.budget is not None and self.queries_used >= self.budget:
                raise BudgetExhaustedError(
                    f"attack {self.source_id}->{self.target_id} used its budget of {self.budget} queries"
                )
            raw = self.oracle.query(img, self.source_id, self.target_id)
            self.queries_used += 1
            result = QueryResult(
                confidence=raw.confidence,
                stealthiness=raw.stealthiness,
                probabilities=raw.probabilities,
                query_index=self.queries_used,
            )
            for listener in self.listeners:
                listener(result, context)
            return result


class SimulatedOracle(Oracle):
    """In-process oracle: template classifier confidence plus SSIM stealthiness."""

    def __init__(self, faces: FaceSet, cfg=SimOracleConfig(), ssim_cfg=DEFAULT_SSIM):
        self.faces = faces
        self.cfg = cfg
        self.ssim_cfg = ssim_cfg
        self.classifier = TemplateFaceClassifier(cfg.embed_size, cfg.temperature).fit(faces.images)
        self._scorers = [SsimScorer(im, ssim_cfg) for im in faces.images]

    @property
    def n_classes(self):
        return len(self.faces)

    def classify(self, img):
        return self.classifier.class_probabilities(img)

    def query(self, img, source_id, target_id):
        self._check_ids(source_id, target_id)
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 2:
            img = img[:, :, None]
        if img.shape != self.faces.shape:
            raise InvalidParameterError(f"image shape {img.shape} does not match face shape {self.faces.shape}")
        p = self.classify(img)
        return QueryResult(
            confidence=float(p[target_id]),
            stealthiness=self._scorers[source_id](img),
            probabilities=tuple(float(v) for v in p),
        )

    def gradient_log_confidence(self, img, target_id):
        return self.classifier.gradient_log_proba(img, target_id)


DEFAULT_FIELDS = {"confidence": "confidence", "stealthiness": "stealthiness", "probabilities": "probabilities"}


class RemoteOracle(Oracle):
    """Client for an HTTP scoring API.

    Sends ``{"image_png_b64", "source_id", "target_id"}`` to ``url`` and reads
    the response fields named in ``field_map``.  Transport failures and 5xx
    responses are retried with exponential backoff.  At most
    ``max_concurrent`` requests are in flight across all attacks.
    """

    def __init__(
        self,
        url,
        field_map=None,
        api_key=None,
        timeout=30.0,
        retries=3,
        backoff=0.5,
        max_concurrent=4,
        session=None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.url = url
        self.field_map = {**DEFAULT_FIELDS, **(field_map or {})}
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.http = session or requests.Session()
        self._slots = threading.BoundedSemaphore(max_concurrent)
        self._sleep = sleep

    def _post(self, payload):
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["X-Api-Key"] = self.api_key
        last = None
        for attempt in range(self.retries + 1):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._slots:
                    resp = self.http.post(self.url, data=json.dumps(payload), headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last = exc
                logger.warning("query attempt %d failed: %s", attempt + 1, exc)
                continue
            if resp.status_code == 429:
                raise BudgetExhaustedError(f"remote oracle refused the query: {resp.text}")
            if resp.status_code in (400, 404):
                raise InvalidParameterError(f"remote oracle rejected the query ({resp.status_code}): {resp.text}")
            if resp.status_code >= 500:
                last = TransportError(f"HTTP {resp.status_code}: {resp.text}")
                logger.warning("query attempt %d failed: HTTP %d", attempt + 1, resp.status_code)
                continue
            if resp.status_code != 200:
                raise TransportError(f"unexpected HTTP {resp.status_code}: {resp.text}")
            try:
                return resp.json()
            except ValueError as exc:
                raise TransportError(f"response is not JSON: {exc}") from exc
        raise TransportError(f"remote oracle unreachable after {self.retries + 1} attempts: {last}")

    def query(self, img, source_id, target_id):
        self._check_ids(source_id, target_id)
        payload = {
            "image_png_b64": base64.b64encode(encode_png(img)).decode("ascii"),
            "source_id": int(source_id),
            "target_id": int(target_id),
        }
        body = self._post(payload)
        try:
            confidence = float(body[self.field_map["confidence"]])
            stealthiness = float(body[self.field_map["stealthiness"]])
        except (KeyError, TypeError, ValueError) as exc:
            raise TransportError(f"malformed oracle response {body!r}") from exc
        probs = body.get(self.field_map["probabilities"])
        return QueryResult(
            confidence=confidence,
            stealthiness=stealthiness,
            probabilities=tuple(float(v) for v in probs) if probs is not None else None,
        )


class _QueryHandler(BaseHTTPRequestHandler):
    server_version = "facepaste/0.1"

    def log_message(self, fmt, *args):
        logger.debug("%s - %s", self.address_string(), fmt % args)

    def _reply(self, status, body):
        data = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_POST(self):
        if self.path.rstrip("/") != "/query":
            self._reply(404, {"error": f"unknown endpoint {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
            request = json.loads(self.rfile.read(length) or b"null")
            if not isinstance(request, dict):
                raise ValueError("request body must be a JSON object")
            blob = base64.b64decode(request["image_png_b64"], validate=True)
            source_id, target_id = request["source_id"], request["target_id"]
            if not all(isinstance(v, int) and not isinstance(v, bool) for v in (source_id, target_id)):
                raise ValueError("class ids must be integers")
            img = decode_png(blob)
        except (KeyError, ValueError, TypeError, binascii.Error, InvalidParameterError) as exc:
            self._reply(400, {"error": f"malformed request: {exc}"})
            return

        state = self.server.state
        n = state.oracle.n_classes
        if not (0 <= source_id < n and 0 <= target_id < n):
            self._reply(404, {"error": f"unknown class id (valid ids are 0-{n - 1})"})
            return
        if source_id == target_id:
            self._reply(400, {"error": "source_id and target_id must differ"})
            return
        key = (self.headers.get("X-Api-Key", ""), source_id, target_id)
        with state.lock:
            used = state.counters.get(key, 0)
            if state.budget is not None and used >= state.budget:
                self._reply(429, {"error": "query budget exhausted", "queries_used": used})
                return
            state.counters[key] = used + 1
        try:
            result = state.oracle.query(img, source_id, target_id)
        except FacePasteError as exc:
            with state.lock:
                state.counters[key] -= 1
            self._reply(400, {"error": str(exc)})
            return
        body = {
            "confidence": result.confidence,
            "stealthiness": result.stealthiness,
            "queries_used": used + 1,
        }
        if result.probabilities is not None:
            body["probabilities"] = list(result.probabilities)
        self._reply(200, body)


@dataclass
class _ServerState:
    oracle: Oracle
    budget: Optional[int]
    counters: dict = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)


def make_server(oracle, host="127.0.0.1", port=8000, budget=None):
    """Build (but do not start) an HTTP server answering ``POST /query``.

    Call ``serve_forever()`` on the result, or run it in a thread.  Query
    counts are kept per ``(X-Api-Key, source_id, target_id)``; with a
    ``budget`` set, further queries get HTTP 429.
    """
    try:
        server = ThreadingHTTPServer((host, port), _QueryHandler)
    except OSError as exc:
        raise ConfigurationError(f"cannot bind {host}:{port}: {exc}") from exc
    server.daemon_threads = True
    server.state = _ServerState(oracle=oracle, budget=budget)
    return server


def serve(faces, cfg=SimOracleConfig(), bind="127.0.0.1:8000", budget=None):
    """Expose a simulated oracle over HTTP until interrupted."""
    host, _, port = bind.rpartition(":")
    server = make_server(SimulatedOracle(faces, cfg), host or "127.0.0.1", int(port), budget)
    logger.info("serving simulated oracle on http://%s:%d/query", *server.server_address[:2])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
