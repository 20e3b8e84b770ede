"""Command-line entry point: ``facepaste <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .exceptions import FacePasteError
from .oracle import SimOracleConfig, SimulatedOracle, serve
from .pgd_attack import PGDAttack
from .raster import quantize, write_png
from .runner import (
    RunConfig,
    all_pairs,
    curve_export,
    curve_thresholds,
    format_report,
    parse_pair,
    read_run,
    report,
    run_matrix,
    scatter_export,
    tradeoff_curve,
)
from .toyfaces import make_face_set

logger = logging.getLogger("facepaste")

TRANSFER_EMBED_SIZE = 32


def _pairs(args, cfg):
    if args.pair:
        return [parse_pair(p) for p in args.pair]
    return cfg.pairs if cfg.pairs is not None else all_pairs()


def cmd_attack(args):
    cfg = RunConfig.load(args.config)
    cfg.pairs = _pairs(args, cfg)
    modes = ("manual", "auto") if args.mode == "both" else (args.mode,)

    def progress(o):
        status = f"first success at query {o.first_success}" if o.first_success else "no success"
        if o.error:
            status += f" (stopped: {o.error})"
        logger.info("%s [%s]: %s", o.attack, o.mode, status)

    summary = run_matrix(cfg, modes, run_id=args.run_id, progress=progress)
    print(format_report(summary["report"]))
    print(f"results in {summary['run_dir']}")
    return 0


def cmd_serve(args):
    cfg = RunConfig.load(args.config)
    faces = cfg.load_faces()
    spec = {} if isinstance(cfg.oracle, str) else {k: v for k, v in cfg.oracle.items() if k != "type"}
    serve(faces, SimOracleConfig(**spec), bind=args.bind, budget=args.budget)
    return 0


def cmd_pgd(args):
    cfg = RunConfig.load(args.config)
    faces = cfg.load_faces()
    oracle = SimulatedOracle(faces)
    evaluator = SimulatedOracle(faces, SimOracleConfig(embed_size=TRANSFER_EMBED_SIZE)) if args.transfer else None
    pairs = _pairs(args, cfg)
    out_dir = Path(cfg.output_dir) / (args.run_id or "pgd")
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for res in PGDAttack().run(oracle, pairs, eval_oracle=evaluator):
        s, t = res.source_id, res.target_id
        write_png(out_dir / f"pgd_{s}_{t}.png", quantize(res.image))
        row = {
            "attack": f"{s}->{t}",
            "success": res.success,
            "confidence": res.final.confidence,
            "stealthiness": res.final.stealthiness,
            "projection_scale": res.projection_scale,
        }
        if res.transfer is not None:
            row["transfer_confidence"] = res.transfer.confidence
        rows.append(row)
        logger.info("%s: confidence %.4f ssim %.4f", row["attack"], row["confidence"], row["stealthiness"])
    summary = {
        "pairs": len(rows),
        "successes": sum(r["success"] for r in rows),
        "attacks": rows,
    }
    if args.transfer and rows:
        tc = np.array([r["transfer_confidence"] for r in rows])
        summary["transfer_mean_confidence"] = float(tc.mean())
        summary["transfer_max_confidence"] = float(tc.max())
    (out_dir / "pgd_summary.json").write_text(json.dumps(summary, indent=2))
    print(f"white-box successes: {summary['successes']}/{summary['pairs']}")
    if "transfer_mean_confidence" in summary:
        print(
            f"transfer confidence: mean {summary['transfer_mean_confidence']:.4f} "
            f"max {summary['transfer_max_confidence']:.4f}"
        )
    print(f"results in {out_dir}")
    return 0


def cmd_report(args):
    rep = report(read_run(args.run_dir))
    print(format_report(rep))
    if args.json:
        print(json.dumps(rep, indent=2, sort_keys=True))
    return 0


def _union(run_dir):
    return [r for recs in read_run(run_dir).values() for r in recs]


def cmd_curve(args):
    points = tradeoff_curve(_union(args.run_dir), curve_thresholds(args.min, args.max, args.steps))
    text = curve_export(points)
    _emit(text, args.out)
    return 0


def cmd_scatter(args):
    _emit(scatter_export(_union(args.run_dir)), args.out)
    return 0


def _emit(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_gen_faces(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    faces = make_face_set(seed=args.seed)
    for i, f in enumerate(faces):
        write_png(out / f"face_{i}.png", f.image)
        write_png(out / f"mask_{i}.png", f.manual_mask)
    (out / "face_boxes.json").write_text(json.dumps([list(f.face_box) for f in faces]))
    print(f"wrote {len(faces)} faces to {out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="facepaste", description="Query-budgeted face pasting attacks.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("attack", help="run paste-attack campaigns")
    a.add_argument("--config", required=True)
    a.add_argument("--pair", action="append", metavar="S:T", help="restrict to this pair (repeatable)")
    a.add_argument("--mode", choices=("manual", "auto", "both"), default="both")
    a.add_argument("--run-id", help="name of the run directory (default: timestamp)")
    a.set_defaults(func=cmd_attack)

    s = sub.add_parser("serve", help="expose the simulated oracle over HTTP")
    s.add_argument("--config", required=True)
    s.add_argument("--bind", default="127.0.0.1:8000", metavar="HOST:PORT")
    s.add_argument("--budget", type=int, default=None, help="queries per key and pair (default: unlimited)")
    s.set_defaults(func=cmd_serve)

    g = sub.add_parser("pgd", help="white-box PGD against the simulated oracle")
    g.add_argument("--config", required=True)
    g.add_argument("--pair", action="append", metavar="S:T")
    g.add_argument("--transfer", action="store_true", help="also score with a differently configured oracle")
    g.add_argument("--run-id")
    g.set_defaults(func=cmd_pgd)

    r = sub.add_parser("report", help="summarize a run directory")
    r.add_argument("run_dir")
    r.add_argument("--json", action="store_true", help="also print the JSON summary")
    r.set_defaults(func=cmd_report)

    c = sub.add_parser("curve", help="stealthiness/confidence tradeoff curve as CSV")
    c.add_argument("run_dir")
    c.add_argument("--min", type=float, default=0.5)
    c.add_argument("--max", type=float, default=1.0)
    c.add_argument("--steps", type=int, default=51)
    c.add_argument("--out", help="write to a file instead of stdout")
    c.set_defaults(func=cmd_curve)

    sc = sub.add_parser("scatter", help="successful query placements as CSV")
    sc.add_argument("run_dir")
    sc.add_argument("--out")
    sc.set_defaults(func=cmd_scatter)

    f = sub.add_parser("gen-faces", help="write the toy face set")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_gen_faces)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except FacePasteError as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
