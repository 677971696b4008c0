"""Detection mAP (oriented box IoU), mesh mAP (Chamfer distance) and layout
corner F1, plus directory-level evaluation and report writing."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import CATEGORIES
from .geometry import OrientedBox3, TriMesh, chamfer_distance, oriented_iou, sample_mesh_surface
from .io import atomic_write_text, read_obj


@dataclass
class ScoredItem:
    """One prediction or ground-truth instance. ``score`` is ignored for GT."""

    scene: str
    class_id: int
    box: OrientedBox3 | None = None
    score: float = 1.0
    mesh: TriMesh | None = None


def average_precision(tp_flags, n_gt: int):
    """All-point interpolated AP for detections already sorted by confidence.

    Returns ``(ap, precision, recall)``.
    """
    tp = np.asarray(tp_flags, dtype=np.float64)
    if n_gt == 0:
        return float("nan"), np.zeros(0), np.zeros(0)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    ap = float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    return ap, precision, recall


def _ranked(preds):
    return sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))


def _match_class(preds, gts, affinity, accept):
    """Greedy matching in descending confidence; ``affinity`` is larger-is-better."""
    by_scene = {}
    for j, g in enumerate(gts):
        by_scene.setdefault(g.scene, []).append(j)
    used = set()
    flags = []
    for i in _ranked(preds):
        best, best_j = None, None
        for j in by_scene.get(preds[i].scene, []):
            if j in used:
                continue
            a = affinity(preds[i], gts[j])
            if accept(a) and (best is None or a > best):
                best, best_j = a, j
        if best_j is None:
            flags.append(0)
        else:
            used.add(best_j)
            flags.append(1)
    return flags


def _per_class_map(preds, gts, affinity, accept, class_ids):
    ap, curves, excluded = {}, {}, []
    for c in class_ids:
        p = [x for x in preds if x.class_id == c]
        g = [x for x in gts if x.class_id == c]
        if not g:
            excluded.append(c)
            continue
        flags = _match_class(p, g, affinity, accept)
        ap[c], prec, rec = average_precision(flags, len(g))
        curves[c] = {"precision": prec.tolist(), "recall": rec.tolist()}
    mean = float(np.mean(list(ap.values()))) if ap else 0.0
    return {"ap": ap, "map": mean, "excluded": excluded, "curves": curves}


def _class_ids(preds, gts, class_ids):
    if class_ids is not None:
        return list(class_ids)
    return sorted({x.class_id for x in preds} | {x.class_id for x in gts})


def detection_map(preds, gts, iou_threshold: float = 0.25, class_ids=None) -> dict:
    return _per_class_map(preds, gts, lambda p, g: oriented_iou(p.box, g.box),
                          lambda a: a >= iou_threshold, _class_ids(preds, gts, class_ids))


class _SampleCache:
    def __init__(self, n: int, seed: int):
        self.n, self.seed, self.store = n, seed, {}

    def __call__(self, item):
        key = id(item)
        if key not in self.store:
            if item.mesh is None or item.mesh.is_empty():
                self.store[key] = None
            else:
                self.store[key] = sample_mesh_surface(item.mesh, self.n, self.seed).points
        return self.store[key]


def cd_map(preds, gts, cd_threshold: float = 0.1, n_samples: int = 2048, seed: int = 0, class_ids=None,
           cache: _SampleCache | None = None) -> dict:
    """Mesh mAP where a match needs the same class and Chamfer distance at most
    ``cd_threshold``. Empty predicted meshes are false positives."""
    samples = cache or _SampleCache(n_samples, seed)
    memo = {}

    def affinity(p, g):
        key = (id(p), id(g))
        if key not in memo:
            sp, sg = samples(p), samples(g)
            memo[key] = -np.inf if sp is None or sg is None else -chamfer_distance(sp, sg)
        return memo[key]

    return _per_class_map(preds, gts, affinity, lambda a: -a <= cd_threshold, _class_ids(preds, gts, class_ids))


def layout_counts(pred_corners, gt_corners, dist_threshold: float = 0.3):
    """Greedy nearest-pair matching; returns ``(matches, n_pred, n_gt)``."""
    p = np.asarray(pred_corners, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gt_corners, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0 or len(g) == 0:
        return 0, len(p), len(g)
    d = np.linalg.norm(p[:, None] - g[None], axis=2)
    order = np.lexsort((np.arange(d.size) % len(g), np.arange(d.size) // len(g), d.reshape(-1)))
    used_p, used_g, m = set(), set(), 0
    for k in order:
        i, j = divmod(int(k), len(g))
        if d[i, j] > dist_threshold:
            break
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        m += 1
    return m, len(p), len(g)


def f1_from_counts(m: int, n_pred: int, n_gt: int):
    """``(precision, recall, f1, both_empty_flag)``."""
    if n_pred == 0 and n_gt == 0:
        return 1.0, 1.0, 1.0, True
    p = m / n_pred if n_pred else 0.0
    r = m / n_gt if n_gt else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f, False


def layout_f1(pred_corners, gt_corners, dist_threshold: float = 0.3):
    return f1_from_counts(*layout_counts(pred_corners, gt_corners, dist_threshold))


# ---------------------------------------------------------------------------
# Directory evaluation
# ---------------------------------------------------------------------------

@dataclass
class SceneResult:
    objects: list = field(default_factory=list)   # (class_id, score, box, mesh path or None)
    corners: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))


def read_scene_result(scene_dir) -> SceneResult:
    """Read either a reconstruction output directory or a ground-truth scene."""
    d = Path(scene_dir)
    if (d / "scene.json").is_file():
        doc = json.loads((d / "scene.json").read_text())
        objs = [(o["class_id"], o["score"], OrientedBox3.from_dict(o["box"]),
                 d / o["mesh"] if o.get("mesh") else None) for o in doc["objects"]]
        lay = json.loads((d / doc.get("layout", "layout.json")).read_text()) if doc.get("layout") else None
        corners = np.array(lay["corners"]).reshape(-1, 3) if lay else np.zeros((0, 3))
        return SceneResult(objs, corners)
    gt = d / "gt"
    if (gt / "boxes.json").is_file():
        doc = json.loads((gt / "boxes.json").read_text())
        objs = [(o["class_id"], o.get("score", 1.0), OrientedBox3.from_dict(o["box"]), gt / o["mesh"])
                for o in doc["objects"]]
        lay = json.loads((gt / "layout.json").read_text())
        return SceneResult(objs, np.array(lay["corners"]).reshape(-1, 3))
    raise FileNotFoundError(f"no scene.json or gt/boxes.json under {d}")


def scene_dirs(root) -> dict:
    """Map scene id -> directory, for a corpus/prediction root or a single scene."""
    root = Path(root)
    if (root / "scene.json").is_file() or (root / "gt" / "boxes.json").is_file():
        return {root.name: root}
    base = root / "scenes" if (root / "scenes").is_dir() else root
    out = {p.name: p for p in sorted(base.iterdir()) if p.is_dir()
           and ((p / "scene.json").is_file() or (p / "gt" / "boxes.json").is_file())}
    if not out:
        raise FileNotFoundError(f"no scenes found under {root}")
    return out


def _load_mesh(path):
    if path is None or not Path(path).is_file():
        return TriMesh(np.zeros((0, 3)))
    return read_obj(path)


def evaluate_results(pred: dict, gt: dict, cfg, seed: int = 0) -> dict:
    """``pred``/``gt`` map scene id -> SceneResult. Scenes missing from ``pred``
    count as empty predictions."""
    ids = sorted(gt)
    p_items, g_items = [], []
    m_tot = np_tot = ng_tot = 0
    per_scene_f1 = {}
    for sid in ids:
        g = gt[sid]
        p = pred.get(sid, SceneResult())
        for c, s, b, m in g.objects:
            g_items.append(ScoredItem(sid, c, b, 1.0, _load_mesh(m)))
        for c, s, b, m in p.objects:
            p_items.append(ScoredItem(sid, c, b, s, _load_mesh(m)))
        m, n_p, n_g = layout_counts(p.corners, g.corners, cfg.layout_dist)
        m_tot, np_tot, ng_tot = m_tot + m, np_tot + n_p, ng_tot + n_g
        per_scene_f1[sid] = f1_from_counts(m, n_p, n_g)[2]
    classes = list(range(len(CATEGORIES)))
    det = detection_map(p_items, g_items, cfg.eval_iou, classes)
    cache = _SampleCache(cfg.cd_samples, seed)
    cds = {f"{t:g}": cd_map(p_items, g_items, t, cfg.cd_samples, seed, classes, cache) for t in cfg.cd_thresholds}
    prec, rec, f1, _ = f1_from_counts(m_tot, np_tot, ng_tot)
    return {
        "scenes": len(ids),
        "detection": {"iou": cfg.eval_iou, **_named(det)},
        "mesh": {t: _named(r) for t, r in cds.items()},
        "layout": {"dist": cfg.layout_dist, "precision": prec, "recall": rec, "f1": f1,
                   "per_scene_f1": per_scene_f1},
    }


def _named(r: dict) -> dict:
    return {"map": r["map"], "ap": {CATEGORIES[c]: v for c, v in r["ap"].items()},
            "excluded": [CATEGORIES[c] for c in r["excluded"]],
            "curves": {CATEGORIES[c]: v for c, v in r["curves"].items()}}


def evaluate_dirs(pred_root, gt_root, cfg, seed: int = 0) -> dict:
    gt = {k: read_scene_result(v) for k, v in scene_dirs(gt_root).items()}
    pred = {k: read_scene_result(v) for k, v in scene_dirs(pred_root).items()}
    if len(gt) == 1 and len(pred) == 1:  # single scene given directly on both sides
        (gk,), (pk,) = gt.keys(), pred.keys()
        pred = {gk: pred[pk]}
    return evaluate_results(pred, gt, cfg, seed)


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "threshold", "class", "value"])
    det = report["detection"]
    for c, v in det["ap"].items():
        w.writerow(["box_ap", det["iou"], c, f"{v:.6f}"])
    w.writerow(["box_map", det["iou"], "all", f"{det['map']:.6f}"])
    for t, r in report["mesh"].items():
        for c, v in r["ap"].items():
            w.writerow(["cd_ap", t, c, f"{v:.6f}"])
        w.writerow(["cd_map", t, "all", f"{r['map']:.6f}"])
    lay = report["layout"]
    for k in ("precision", "recall", "f1"):
        w.writerow([f"layout_{k}", lay["dist"], "all", f"{lay[k]:.6f}"])
    return buf.getvalue()


def write_report(report: dict, json_path) -> tuple:
    """Write the JSON report and a CSV twin next to it; returns both paths."""
    json_path = Path(json_path)
    atomic_write_text(json_path, json.dumps(report, indent=1, sort_keys=True))
    csv_path = json_path.with_suffix(".csv")
    atomic_write_text(csv_path, report_csv(report))
    return json_path, csv_path
