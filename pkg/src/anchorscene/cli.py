"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad arguments,
missing input files or checkpoints).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import Config, ConfigError, SceneSpec, load_kv
from .io import FormatError, atomic_write_text, read_ply
from .nnet import NetError

log = logging.getLogger("anchorscene")


class UsageError(Exception):
    pass


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_config(path, seed) -> Config:
    cfg = load_kv(_require_file(path, "config file"), Config) if path else Config()
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def cmd_gen(args):
    from .synthdata import generate_corpus
    spec = load_kv(_require_file(args.spec, "spec file"), SceneSpec) if args.spec else SceneSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, rng_seed=args.seed)
    out = generate_corpus(spec, args.count, args.out, args.first)
    print(f"wrote {args.count} scenes to {out}")


def cmd_train_det(args):
    from . import plotting
    from .trainer import DET_TERMS, train_detector
    cfg = _load_config(args.config, args.seed)
    if args.resume:
        _require_file(args.resume, "checkpoint")
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")
    run = train_detector(args.corpus, cfg, out, log_path, resume=args.resume)
    fusion = {b: run.detector.blocks[f"{b}_fusion"].as_dict() for b in ("obj", "wall")
              if f"{b}_fusion" in run.detector.blocks}
    if fusion:
        atomic_write_text(out.with_name(out.stem + "_fusion.json"), json.dumps(fusion, indent=1))
    if not args.no_plots:
        plotting.plot_loss_curves(run.history, DET_TERMS, out.with_name(out.stem + "_loss.png"), "detector loss")
        if fusion:
            plotting.plot_fusion_weights(fusion, out.with_name(out.stem + "_fusion.png"))
    if run.dead_blocks:
        log.warning("blocks without gradient in epoch 1: %s", ", ".join(run.dead_blocks))
    print(f"detector checkpoint: {out}; final loss {run.history[-1]['total']:.4f}")


def cmd_train_shape(args):
    from . import plotting
    from .trainer import load_detector, train_shapes
    cfg = _load_config(args.config, args.seed)
    det = load_detector(_require_file(args.det, "checkpoint"))
    out = Path(args.out)
    run = train_shapes(args.corpus, args.det, cfg, out, out.with_suffix(".csv"), detector=det)
    if not args.no_plots and run.history:
        plotting.plot_loss_curves(run.history, (), out.with_name(out.stem + "_loss.png"), "shape loss")
    print(f"shape checkpoint: {out}; final loss {run.history[-1]['total'] if run.history else float('nan'):.4f}")


def cmd_reconstruct(args):
    from .pipeline import reconstruct_scene, write_scene_model
    from .synthdata import load_corpus
    from .trainer import load_detector, load_shapes
    det = load_detector(_require_file(args.det, "checkpoint"))
    enc, dec, _ = load_shapes(_require_file(args.shape, "checkpoint"))
    cfg = dataclasses.replace(det.cfg, objectness_threshold=args.objectness, nms_iou=args.nms)
    det.cfg = cfg
    seed = cfg.seed if args.seed is None else args.seed
    if args.scan:
        jobs = [(_require_file(args.scan, "scan"), Path(args.out))]
    else:
        jobs = [(d / "scan.ply", Path(args.out) / "scenes" / d.name) for d in load_corpus(args.corpus)]
    for scan_path, out in jobs:
        scan = read_ply(scan_path)
        model = reconstruct_scene(scan, det, enc, dec, cfg, seed, args.sampling, args.vote_only)
        write_scene_model(out, model)
        print(f"{out}: {len(model.objects)} objects, layout {'ok' if model.layout else 'none'}")


def cmd_evaluate(args):
    from . import plotting
    from .evalkit import evaluate_dirs, write_report
    cfg = _load_config(args.config, None)
    for p, what in ((args.pred, "prediction directory"), (args.gt, "ground-truth directory")):
        if not Path(p).exists():
            raise UsageError(f"{what} not found: {p}")
    report = evaluate_dirs(args.pred, args.gt, cfg, 0 if args.seed is None else args.seed)
    json_path, csv_path = write_report(report, args.report)
    if not args.no_plots:
        plotting.report_figures(report, Path(json_path).with_suffix(""))
    det, lay = report["detection"], report["layout"]
    cd = ", ".join(f"CD@{t} {r['map']:.3f}" for t, r in report["mesh"].items())
    print(f"box mAP@{det['iou']:g} {det['map']:.3f}; {cd}; layout F1 {lay['f1']:.3f}")
    print(f"report: {json_path} (+ {csv_path.name})")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anchorscene", description="Anchor-guided indoor scene reconstruction")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--spec")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--first", type=int, default=0, help="first scene seed")
    g.add_argument("--seed", type=int, help="override the spec rng_seed")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train-det", help="train the detector")
    t.add_argument("--corpus", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--log")
    t.add_argument("--resume")
    t.add_argument("--seed", type=int)
    t.add_argument("--no-plots", action="store_true")
    t.set_defaults(fn=cmd_train_det)

    s = sub.add_parser("train-shape", help="train the shape decoder on frozen detector proposals")
    s.add_argument("--corpus", required=True)
    s.add_argument("--det", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(fn=cmd_train_shape)

    r = sub.add_parser("reconstruct", help="reconstruct a scan (or every scene of a corpus)")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--scan")
    src.add_argument("--corpus")
    r.add_argument("--det", required=True)
    r.add_argument("--shape", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--objectness", type=float, default=0.5)
    r.add_argument("--nms", type=float, default=0.25)
    r.add_argument("--sampling", choices=("anchor", "box"), default="anchor")
    r.add_argument("--vote-only", action="store_true")
    r.add_argument("--seed", type=int)
    r.set_defaults(fn=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--config")
    e.add_argument("--seed", type=int, help="mesh sampling seed for Chamfer distances")
    e.add_argument("--no-plots", action="store_true")
    e.set_defaults(fn=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (UsageError, FileNotFoundError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NetError, FormatError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
