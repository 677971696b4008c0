"""Two-stage training.

Stage 1 trains the detector on whole scenes with Adam and a plateau
schedule. Stage 2 freezes it, turns its best proposal per ground-truth
object into a shape sample (box frame, instance points, proposal features,
labelled occupancy queries) and trains the occupancy encoder/decoder on
those, optionally warm-started by a pass over ground-truth shapes.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import heads, shapedec
from .ancgroup import sample_instance_points
from .config import Config, dump_kv, parse_kv
from .detector import Detector, SceneData, apply_tapes, prepare_scene
from .geometry import OrientedBox3, PointCloud, sample_mesh_surface
from .io import atomic_write_text
from .nnet import GradTape, PlateauScheduler, adam_step, load_checkpoint, save_checkpoint
from .synthdata import load_corpus, read_scan, read_scene

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def _scene_seed(scene_dir: Path) -> int:
    try:
        return int(Path(scene_dir).name)
    except ValueError:
        return 0


def load_training_scenes(corpus_dir, cfg: Config, limit: int | None = None):
    dirs = load_corpus(corpus_dir)
    if limit is not None:
        dirs = dirs[:limit]
    if not dirs:
        raise TrainingError(f"corpus is empty: {corpus_dir}")
    out = []
    for d in dirs:
        scene = read_scene(d)
        scan = read_scan(d)
        out.append((d, scene, scan, prepare_scene(scan.points, cfg, scene, _scene_seed(d))))
    return out


def config_from_meta(meta: dict) -> Config:
    return parse_kv(meta["config"], Config)


def _batches(n: int, size: int, rng):
    perm = rng.permutation(n)
    return [perm[s:s + size] for s in range(0, n, size)]


def history_csv(history: list, terms) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "lr", "total", *terms])
    for row in history:
        w.writerow([row["epoch"], repr(row["lr"]), repr(row["total"]), *(repr(row[t]) for t in terms)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------

DET_TERMS = heads.OBJ_TERMS + heads.WALL_TERMS + heads.ANCHOR_TERMS


@dataclass
class DetectorRun:
    detector: Detector
    history: list
    dead_blocks: list
    checkpoint: Path | None


def detector_epoch(det: Detector, data: list, epoch: int, lr: float, track_grads: dict | None = None):
    """One pass over ``data`` (list of SceneData); returns mean loss terms."""
    cfg = det.cfg
    rng = np.random.default_rng([cfg.seed, 7, epoch])
    sums = dict.fromkeys(DET_TERMS, 0.0)
    total = 0.0
    for batch in _batches(len(data), cfg.batch, rng):
        acc = {}
        for i in batch:
            loss, br, tapes, _ = det.loss_and_grads(data[i])
            total += loss
            for k in DET_TERMS:
                sums[k] += br[k]
            for name, t in tapes.items():
                if name in acc:
                    acc[name].add_(t)
                else:
                    acc[name] = t.copy()
        for t in acc.values():
            t.scale_(1.0 / len(batch))
        if track_grads is not None:
            for name, t in acc.items():
                track_grads[name] = track_grads.get(name, False) or t.max_abs() > 0
        apply_tapes(det.blocks, acc, lr, cfg)
    n = len(data)
    row = {k: v / n for k, v in sums.items()}
    row["total"] = total / n
    return row


def train_detector(corpus_dir, cfg: Config, out_path=None, log_path=None, resume=None, limit=None,
                   scenes=None, epochs: int | None = None, on_epoch=None) -> DetectorRun:
    """Train (or resume) the detector; ``scenes`` may pass pre-loaded data."""
    scenes = scenes if scenes is not None else load_training_scenes(corpus_dir, cfg, limit)
    if not scenes:
        raise TrainingError("corpus is empty")
    data = [s[3] for s in scenes]
    history, start = [], 1
    sched = PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold)
    if resume is not None:
        blocks, meta = load_checkpoint(resume)
        det = Detector(cfg, blocks)
        history = list(meta.get("history", []))
        sched.load_state(meta["scheduler"])
        start = meta["epoch"] + 1
    else:
        det = Detector(cfg)
    last = cfg.epochs if epochs is None else epochs
    seen = {}
    for epoch in range(start, last + 1):
        row = detector_epoch(det, data, epoch, sched.lr, seen if epoch == 1 else None)
        row["epoch"], row["lr"] = epoch, sched.lr
        history.append(row)
        sched.step(row["total"])
        log.info("detector epoch %d loss %.4f lr %.2e", epoch, row["total"], row["lr"])
        if on_epoch is not None:
            on_epoch(row)
        if out_path is not None:
            save_detector(out_path, det, epoch, sched, history)
    dead = sorted(name for name, alive in seen.items() if not alive)
    if log_path is not None:
        atomic_write_text(log_path, history_csv(history, DET_TERMS))
    return DetectorRun(det, history, dead, Path(out_path) if out_path else None)


def save_detector(path, det: Detector, epoch: int, sched: PlateauScheduler, history: list):
    meta = {"kind": "detector", "epoch": epoch, "config": dump_kv(det.cfg), "scheduler": sched.state(),
            "history": history}
    save_checkpoint(path, det.blocks, meta)


def load_detector(path, cfg: Config | None = None) -> Detector:
    blocks, meta = load_checkpoint(path)
    if meta.get("kind") != "detector":
        raise TrainingError(f"{path} is not a detector checkpoint")
    return Detector(cfg or config_from_meta(meta), blocks)


# ---------------------------------------------------------------------------
# Stage 2 samples
# ---------------------------------------------------------------------------

@dataclass
class ShapeSample:
    points: np.ndarray    # encoder input rows: canonical points + features
    queries: np.ndarray   # (Q, 3) canonical
    labels: np.ndarray    # (Q,)
    class_id: int


def _cap(pts: np.ndarray, n: int, rng) -> np.ndarray:
    if len(pts) <= n:
        return pts
    return pts[np.sort(rng.choice(len(pts), n, replace=False))]


def instance_points(scan_points: np.ndarray, tree, box: OrientedBox3, anchors, cfg: Config, mode: str = "anchor"):
    """World-space points handed to the shape encoder: the anchor-grown prior
    (or the scan points inside the box for ``mode='box'``) plus the anchors."""
    if mode == "anchor":
        prior = sample_instance_points(PointCloud(scan_points), anchors, cfg.sample_iterations,
                                       cfg.radius_floor, tree).prior.points
    elif mode == "box":
        prior = scan_points[box.contains(scan_points)]
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return np.concatenate([prior, anchors], axis=0)


def encoder_rows(world_pts, box, f_vote, f_anchor, cfg: Config, rng) -> np.ndarray:
    canon = _cap(shapedec.canonicalize(world_pts, box), cfg.prior_points, rng)
    return shapedec.encoder_input(canon, f_vote, f_anchor)


def best_proposals(det: Detector, data: SceneData):
    """For each GT object, the highest-objectness positive candidate (or None).

    Returns a list of ``(gt index, box, anchors, f_vote, f_anchor)``.
    """
    cfg = det.cfg
    out = det.branch_forward("obj", data)
    labels = heads.assign_targets(out["centers"], data.obj_targets.centers, cfg.pos_dist, cfg.neg_dist)
    picks = []
    for j in range(len(data.boxes)):
        cand = np.flatnonzero(labels == j)
        if len(cand) == 0:
            continue
        params = [heads.BoxParams.from_vector(out["theta"][i], cfg.heading_bins, cfg.num_classes) for i in cand]
        scores = [p.score() for p in params]
        k = int(np.argmax(scores))
        i = cand[k]
        picks.append((j, params[k].box(out["centers"][i]), out["anchors"][i], out["fvote"][i], out["fanc"][i]))
    return picks


def build_shape_samples(det: Detector, scenes: list, cfg: Config, pretrain: bool = False):
    """Stage-2 samples from frozen detector proposals.

    With ``pretrain`` the box frame is the GT box and the instance points are
    complete GT surface samples, the stand-in for pretraining on clean shapes.
    """
    samples = []
    for d, scene, scan, data in scenes:
        sid = _scene_seed(d)
        tree = cKDTree(scan.points)
        for j, box, anchors, fv, fa in best_proposals(det, data):
            rng = np.random.default_rng([cfg.seed, 13, sid, j, int(pretrain)])
            obj = scene.objects[j]
            surf = data.obj_surfaces[j]
            if pretrain:
                box = obj.box
                world = sample_mesh_surface(obj.mesh, cfg.prior_points, [sid, j, 99]).points
            else:
                world = instance_points(scan.points, tree, box, anchors, cfg)
            rows = encoder_rows(world, box, fv, fa, cfg, rng)
            q, lab = shapedec.occupancy_samples(box, surf, obj.contains, rng, cfg.occ_queries // 2,
                                                cfg.occ_queries - cfg.occ_queries // 2)
            samples.append(ShapeSample(rows, q, lab, obj.class_id))
    return samples


# ---------------------------------------------------------------------------
# Stage 2 training
# ---------------------------------------------------------------------------

def shape_epoch(enc, dec, samples: list, epoch: int, lr: float, cfg: Config, tag: int = 0) -> float:
    rng = np.random.default_rng([cfg.seed, 11, tag, epoch])
    total = 0.0
    for batch in _batches(len(samples), cfg.shape_batch, rng):
        te, td = GradTape.zeros_for(enc), GradTape.zeros_for(dec)
        for i in batch:
            s = samples[i]
            sel = rng.choice(len(s.queries), min(cfg.occ_batch_queries, len(s.queries)), replace=False)
            loss, e, d = shapedec.shape_loss_and_grads(s.points, s.queries[sel], s.labels[sel], enc, dec)
            total += loss
            te.add_(e)
            td.add_(d)
        te.scale_(1.0 / len(batch))
        td.scale_(1.0 / len(batch))
        adam_step(enc, te, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        adam_step(dec, td, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return total / len(samples)


def evaluate_shape_loss(enc, dec, samples: list) -> float:
    tot = 0.0
    for s in samples:
        f, _ = shapedec.encode_forward(s.points, enc)
        logits = shapedec.occupancy_logits(f, s.queries, dec)
        tot += shapedec.bce_with_logits(logits, s.labels)[0]
    return tot / max(1, len(samples))


@dataclass
class ShapeRun:
    enc: object
    dec: object
    history: list
    pretrain_history: list
    checkpoint: Path | None


def train_shapes(corpus_dir, det_ckpt, cfg: Config, out_path=None, log_path=None, limit=None, scenes=None,
                 detector: Detector | None = None, pretrain: bool | None = None, epochs: int | None = None,
                 samples=None) -> ShapeRun:
    det = detector if detector is not None else load_detector(det_ckpt)
    digest_before = {k: b.digest() for k, b in det.blocks.items()}
    if samples is None:
        scenes = scenes if scenes is not None else load_training_scenes(corpus_dir, cfg, limit)
        samples = build_shape_samples(det, scenes, cfg)
        pre_samples = build_shape_samples(det, scenes, cfg, pretrain=True) if (
            cfg.pretrain_epochs > 0 and pretrain is not False) else []
    else:
        samples, pre_samples = samples
    enc, dec = shapedec.make_shape_nets(cfg, cfg.seed * 1000 + 500)
    pre_hist = []
    if pre_samples and pretrain is not False:
        for e in range(1, cfg.pretrain_epochs + 1):
            loss = shape_epoch(enc, dec, pre_samples, e, cfg.pretrain_lr, cfg, tag=1)
            pre_hist.append({"epoch": e, "lr": cfg.pretrain_lr, "total": loss})
            log.info("shape pretrain epoch %d loss %.4f", e, loss)
        enc.m = enc.v = dec.m = dec.v = None
        enc.t = dec.t = 0
    sched = PlateauScheduler(cfg.shape_lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold)
    history = []
    n_epochs = cfg.shape_epochs if epochs is None else epochs
    for e in range(1, n_epochs + 1):
        if not samples:
            log.warning("no positive proposals; shape epoch %d skipped", e)
            continue
        lr = sched.lr
        loss = shape_epoch(enc, dec, samples, e, lr, cfg)
        history.append({"epoch": e, "lr": lr, "total": loss})
        sched.step(loss)
        log.info("shape epoch %d loss %.4f", e, loss)
    if any(det.blocks[k].digest() != v for k, v in digest_before.items()):
        raise TrainingError("detector parameters changed during shape training")
    if out_path is not None:
        save_checkpoint(out_path, {"shape_enc": enc, "shape_dec": dec},
                        {"kind": "shape", "config": dump_kv(cfg), "history": history, "pretrain": pre_hist})
    if log_path is not None:
        atomic_write_text(log_path, history_csv(history, ()))
    return ShapeRun(enc, dec, history, pre_hist, Path(out_path) if out_path else None)


def load_shapes(path):
    blocks, meta = load_checkpoint(path)
    if meta.get("kind") != "shape":
        raise TrainingError(f"{path} is not a shape checkpoint")
    return blocks["shape_enc"], blocks["shape_dec"], meta
