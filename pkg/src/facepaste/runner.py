"""Attack campaigns over class pairs, their JSONL logs, and the reports built from them.

A run directory looks like::

    out/<run_id>/
        log_manual.jsonl   one line per query, appended and flushed as it happens
        log_auto.jsonl
        summary.json       per-attack aggregates plus the report
        curve.csv          stealthiness-threshold sweep
        scatter.csv        placement of every successful query
        best_<s>_<t>.png   the selected submission for each attack
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .exceptions import ConfigurationError, FacePasteError, InvalidParameterError
from .oracle import FaceSet, RemoteOracle, SimOracleConfig, SimulatedOracle
from .paste_attack import (
    MASK_MODES,
    STEALTH_THRESHOLD,
    FacePasteAttack,
    MaskBank,
    PasteParams,
    is_success,
    objective,
    render,
)
from .raster import quantize, write_png

logger = logging.getLogger(__name__)

SCATTER_HEADER = ("attack", "cx", "cy", "theta", "confidence", "stealthiness", "success")
CURVE_HEADER = ("threshold", "total_confidence", "total_stealthiness", "dropped_attacks")
N_CLASSES = 10


def all_pairs(n=N_CLASSES):
    return [(s, t) for s in range(n) for t in range(n) if s != t]


def attack_id(source_id, target_id):
    return f"{source_id}->{target_id}"


def parse_attack_id(text):
    s, _, t = text.partition("->")
    return int(s), int(t)


def parse_pair(text):
    """``"S:T"`` -> ``(S, T)``."""
    try:
        s, t = (int(v) for v in text.split(":"))
    except ValueError as exc:
        raise InvalidParameterError(f"pair must look like S:T, got {text!r}") from exc
    if s == t:
        raise InvalidParameterError(f"pair {text!r} has source equal to target")
    return s, t


@dataclass
class RunConfig:
    """Campaign settings, loaded from a JSON file with these exact keys.

    ``faces`` is a toy-generator seed (int) or a directory holding
    ``face_0.png`` .. ``face_9.png``.  ``oracle`` is ``"simulated"`` or an
    object: ``{"type": "simulated", "embed_size": 64, "temperature": 20}`` or
    ``{"type": "remote", "url": ..., "fields": {"confidence": ..., ...}}``.
    ``pairs`` is a list of ``[s, t]`` (default: every ordered pair).
    """

    faces: Union[int, str] = 0
    mask_dir: Optional[str] = None
    oracle: Union[str, dict] = "simulated"
    budget: int = 200
    init_queries: int = 50
    pairs: Optional[list] = None
    output_dir: str = "out"
    seed: int = 0
    concurrency: int = 4

    def __post_init__(self):
        if not 0 < self.init_queries < self.budget:
            raise ConfigurationError("require budget > init_queries > 0")
        if self.concurrency < 1:
            raise ConfigurationError("concurrency must be at least 1")
        if self.pairs is not None:
            pairs = []
            for p in self.pairs:
                s, t = (int(v) for v in p)
                if s == t:
                    raise ConfigurationError(f"pair {p} has source equal to target")
                pairs.append((s, t))
            self.pairs = pairs

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self):
        d = asdict(self)
        if self.pairs is not None:
            d["pairs"] = [list(p) for p in self.pairs]
        return d

    def load_faces(self):
        if isinstance(self.faces, bool):
            raise ConfigurationError("faces must be a seed or a directory")
        if isinstance(self.faces, int):
            return FaceSet.toy(self.faces)
        return FaceSet.from_dir(self.faces)

    def build_oracle(self, faces):
        spec = {"type": self.oracle} if isinstance(self.oracle, str) else dict(self.oracle)
        kind = spec.pop("type", "simulated")
        if kind == "simulated":
            return SimulatedOracle(faces, SimOracleConfig(**spec))
        if kind == "remote":
            if "url" not in spec:
                raise ConfigurationError("a remote oracle needs a url")
            return RemoteOracle(
                spec["url"],
                field_map=spec.get("fields"),
                timeout=spec.get("timeout", 30.0),
                max_concurrent=self.concurrency,
            )
        raise ConfigurationError(f"unknown oracle type {kind!r}")


@dataclass
class AttackRecordLine:
    attack: str
    query_index: int
    params: dict
    confidence: float
    stealthiness: float
    objective: float
    success: bool
    timestamp: str
    mode: str = "manual"

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))


def utc_now():
    return datetime.now(timezone.utc).isoformat(timespec="microseconds").replace("+00:00", "Z")


class JsonlSink:
    """Thread-safe append-only JSONL writer; every line is flushed on write."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._fh = open(self.path, "a", encoding="utf-8")

    def write(self, record):
        line = record.to_json() if hasattr(record, "to_json") else json.dumps(record, sort_keys=True)
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self):
        with self._lock:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_log(path):
    """Parse a JSONL log; a torn final line (crash mid-write) is skipped."""
    records = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            records.append(AttackRecordLine.from_json(line))
        except (ValueError, TypeError) as exc:
            if i == len(lines) - 1:
                logger.warning("skipping truncated last line of %s", path)
                continue
            raise ConfigurationError(f"{path}:{i + 1}: bad log line: {exc}") from exc
    return records


def read_run(run_dir):
    """``{mode: records}`` for every ``log_<mode>.jsonl`` in ``run_dir``."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ConfigurationError(f"no such run directory: {run_dir}")
    logs = {}
    for path in sorted(run_dir.glob("log_*.jsonl")):
        logs[path.stem[len("log_"):]] = read_log(path)
    return logs


# --- selection and reports --------------------------------------------------


def _better(a, b):
    """Higher confidence wins; ties go to higher stealthiness."""
    return b is None or (a.confidence, a.stealthiness) > (b.confidence, b.stealthiness)


def select_best(records, threshold=STEALTH_THRESHOLD):
    """Per attack, the successful query with the best confidence at ``stealthiness >= threshold``."""
    best = {}
    for r in records:
        if r.success and r.stealthiness >= threshold and _better(r, best.get(r.attack)):
            best[r.attack] = r
    return best


def attacks_in(records):
    return sorted({r.attack for r in records}, key=parse_attack_id)


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    total_confidence: float
    total_stealthiness: float
    dropped_attacks: int


def tradeoff_curve(records, thresholds):
    """Total best confidence and its stealthiness as the stealthiness floor rises.

    Attacks without a qualifying query add nothing and are counted as
    dropped.  Records of several modes may be mixed: picking the best query
    over their union is the same as picking the better mode per attack.
    """
    records = list(records)
    names = attacks_in(records)
    points = []
    for tau in thresholds:
        best = select_best(records, tau)
        chosen = [best[a] for a in names if a in best]
        points.append(
            CurvePoint(
                threshold=float(tau),
                total_confidence=math.fsum(r.confidence for r in chosen),
                total_stealthiness=math.fsum(r.stealthiness for r in chosen),
                dropped_attacks=len(names) - len(chosen),
            )
        )
    return points


def curve_thresholds(lo=0.5, hi=1.0, steps=51):
    if steps < 1 or lo > hi:
        raise InvalidParameterError("need steps >= 1 and min <= max")
    return [float(v) for v in np.linspace(lo, hi, steps)]


def first_success(records):
    """``{attack: first successful query_index}``."""
    first = {}
    for r in records:
        if r.success and (r.attack not in first or r.query_index < first[r.attack]):
            first[r.attack] = r.query_index
    return first


def _totals(best, names):
    chosen = [best[a] for a in names if a in best]
    return {
        "total_confidence": math.fsum(r.confidence for r in chosen),
        "total_stealthiness": math.fsum(r.stealthiness for r in chosen),
        "successes": len(chosen),
        "attacks": len(names),
    }


def mode_report(records):
    names = attacks_in(records)
    out = _totals(select_best(records), names)
    firsts = first_success(records)
    out["mean_first_success"] = float(np.mean(list(firsts.values()))) if firsts else None
    out["queries"] = len(records)
    return out


def report(logs):
    """Machine-readable summary of ``{mode: records}``.

    Per mode: summed best confidence and its stealthiness, success count and
    mean first-success query index.  ``combined`` takes, per attack, the mode
    whose selected query has the higher confidence (ties: higher
    stealthiness).
    """
    logs = {m: list(r) for m, r in logs.items() if r}
    if not logs:
        return {}
    out = {"modes": {m: mode_report(r) for m, r in logs.items()}}
    union = [r for recs in logs.values() for r in recs]
    names = attacks_in(union)
    combined = {}
    picks = {}
    for mode, recs in logs.items():
        for a, r in select_best(recs).items():
            if _better(r, combined.get(a)):
                combined[a] = r
                picks[a] = mode
    out["combined"] = {**_totals(combined, names), "mode_per_attack": picks}
    return out


def format_report(rep):
    if not rep:
        return "no queries logged"
    lines = []
    for mode, m in rep["modes"].items():
        mfs = "n/a" if m["mean_first_success"] is None else f"{m['mean_first_success']:.3f}"
        lines.append(
            f"{mode:>8}: successes {m['successes']}/{m['attacks']}  "
            f"confidence {m['total_confidence']:.6f}  stealthiness {m['total_stealthiness']:.6f}  "
            f"mean first success {mfs}"
        )
    c = rep["combined"]
    lines.append(
        f"combined: successes {c['successes']}/{c['attacks']}  "
        f"confidence {c['total_confidence']:.6f}  stealthiness {c['total_stealthiness']:.6f}"
    )
    return "\n".join(lines)


def scatter_rows(records):
    rows = []
    for r in records:
        if r.success:
            p = r.params
            rows.append((r.attack, p["cx"], p["cy"], p.get("theta", 0.0), r.confidence, r.stealthiness, r.success))
    return rows


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else v for v in row])
    return buf.getvalue()


def scatter_export(records):
    """CSV text with one row per successful query."""
    return _csv_text(SCATTER_HEADER, scatter_rows(records))


def curve_export(points):
    return _csv_text(CURVE_HEADER, [(p.threshold, p.total_confidence, p.total_stealthiness, p.dropped_attacks)
                                    for p in points])


# --- campaigns ----------------------------------------------------------------


@dataclass
class AttackOutcome:
    attack: str
    mode: str
    queries: int
    best_objective: Optional[float]
    best_confidence: Optional[float]
    best_stealthiness: Optional[float]
    first_success: Optional[int]
    error: Optional[str] = None


def attack_seed(seed, source_id, target_id, mode):
    return np.random.SeedSequence([int(seed), int(source_id), int(target_id), MASK_MODES.index(mode)])


def _run_one(cfg, oracle, faces, masks, source_id, target_id, mode, sink):
    name = attack_id(source_id, target_id)

    def persist(result, params):
        sink.write(
            AttackRecordLine(
                attack=name,
                query_index=result.query_index,
                params=params.to_dict(),
                confidence=result.confidence,
                stealthiness=result.stealthiness,
                objective=objective(result),
                success=is_success(result, target_id),
                timestamp=utc_now(),
                mode=mode,
            )
        )

    attack = FacePasteAttack(
        mask_mode=mode,
        budget=cfg.budget,
        init_queries=cfg.init_queries,
        random_state=attack_seed(cfg.seed, source_id, target_id, mode),
    )
    try:
        state = attack.run(oracle, faces, masks, source_id, target_id, listeners=[persist])
    except FacePasteError as exc:
        logger.error("attack %s (%s) failed: %s", name, mode, exc)
        return AttackOutcome(name, mode, 0, None, None, None, None, error=str(exc))

    best_obj = max((e.value for e in state.history), default=None)
    succ = [e.payload for e in state.history if is_success(e.payload.result, target_id)]
    top = None
    for c in succ:
        if top is None or (c.result.confidence, c.result.stealthiness) > (top.result.confidence, top.result.stealthiness):
            top = c
    return AttackOutcome(
        attack=name,
        mode=mode,
        queries=len(state.history),
        best_objective=best_obj,
        best_confidence=top.result.confidence if top else None,
        best_stealthiness=top.result.stealthiness if top else None,
        first_success=succ[0].result.query_index if succ else None,
        error=str(state.error) if state.error is not None else None,
    )


def default_run_id(cfg):
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    return f"run-{stamp}-seed{cfg.seed}"


def run_matrix(cfg, modes=("manual",), run_id=None, faces=None, oracle=None, progress=None):
    """Run every configured attack for every mode and write the run directory.

    Returns the summary dict that is also saved as ``summary.json``.
    ``faces`` and ``oracle`` override the ones the config would build.
    """
    for m in modes:
        if m not in MASK_MODES:
            raise ConfigurationError(f"unknown mask mode {m!r}")
    faces = faces if faces is not None else cfg.load_faces()
    oracle = oracle if oracle is not None else cfg.build_oracle(faces)
    masks = MaskBank(faces, cfg.mask_dir)
    pairs = cfg.pairs if cfg.pairs is not None else all_pairs(len(faces))
    for s, t in pairs:
        oracle._check_ids(s, t)

    run_dir = Path(cfg.output_dir) / (run_id or default_run_id(cfg))
    run_dir.mkdir(parents=True, exist_ok=True)
    outcomes = []
    for mode in modes:
        with JsonlSink(run_dir / f"log_{mode}.jsonl") as sink, ThreadPoolExecutor(cfg.concurrency) as pool:
            futures = [pool.submit(_run_one, cfg, oracle, faces, masks, s, t, mode, sink) for s, t in pairs]
            for fut in futures:
                outcome = fut.result()
                outcomes.append(outcome)
                if progress is not None:
                    progress(outcome)

    logs = read_run(run_dir)
    rep = report(logs)
    union = [r for recs in logs.values() for r in recs]
    (run_dir / "curve.csv").write_text(curve_export(tradeoff_curve(union, curve_thresholds())))
    (run_dir / "scatter.csv").write_text(scatter_export(union))
    _write_best_images(run_dir, faces, masks, union)
    summary = {
        "run_dir": str(run_dir),
        "config": cfg.to_dict(),
        "modes": list(modes),
        "attacks": [asdict(o) for o in outcomes],
        "report": rep,
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def _write_best_images(run_dir, faces, masks, records):
    for name, r in select_best(records).items():
        s, t = parse_attack_id(name)
        img = quantize(render(faces, masks, PasteParams.from_dict(r.params), s, t))
        write_png(run_dir / f"best_{s}_{t}.png", img)
