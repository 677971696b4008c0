"""Scene reconstruction: detect, reconstruct object shapes, build the layout
and write everything to an output directory."""

from __future__ import annotations

import colorsys
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import shapedec
from .config import CATEGORIES, Config
from .detector import Detector
from .geometry import OrientedBox3, PointCloud, TriMesh
from .io import atomic_write_text, write_obj, write_ply
from .layout import LayoutError, LayoutPolyline, quads_to_corners
from .trainer import encoder_rows, instance_points

log = logging.getLogger(__name__)

ANCHOR_COLOR = (230, 40, 40)


@dataclass
class ReconObject:
    class_id: int
    score: float
    box: OrientedBox3
    mesh: TriMesh
    anchors: np.ndarray
    prior: np.ndarray
    empty: bool


@dataclass
class SceneModel:
    objects: list = field(default_factory=list)
    walls: list = field(default_factory=list)      # (WallQuad, score)
    layout: LayoutPolyline | None = None


def reconstruct_scene(scan: PointCloud, det: Detector, enc, dec, cfg: Config | None = None, seed: int = 0,
                      sampling: str = "anchor", vote_only: bool = False) -> SceneModel:
    cfg = cfg or det.cfg
    dets, walls, _ = det.detect(scan.points, vote_only)
    tree = cKDTree(scan.points)
    model = SceneModel()
    for k, d in enumerate(dets):
        rng = np.random.default_rng([seed, 17, k])
        mode = sampling if d.anchors is not None else "box"
        anchors = d.anchors if d.anchors is not None else np.zeros((0, 3))
        f_anchor = d.f_anchor if d.f_anchor is not None else np.zeros_like(d.f_vote)
        world = instance_points(scan.points, tree, d.box, anchors, cfg, mode)
        if len(world) == 0:
            world = np.array([d.box.center])
        rows = encoder_rows(world, d.box, d.f_vote, f_anchor, cfg, rng)
        f, _ = shapedec.encode_forward(rows, enc)
        mesh, empty = shapedec.extract_mesh(shapedec.ShapeEmbedding(f), dec, cfg.mesh_resolution, cfg.iso)
        model.objects.append(ReconObject(d.class_id, d.score, d.box, shapedec.align_to_scene(mesh, d.box),
                                         anchors, world[:len(world) - len(anchors)], empty))
    kept = [(q, s) for q, s in walls if s > cfg.wall_objectness_threshold]
    model.walls = kept
    if len(kept) >= 2:
        try:
            model.layout = quads_to_corners([q for q, _ in kept], [s for _, s in kept],
                                            cfg.merge_angle_deg, cfg.merge_dist)
        except LayoutError as exc:
            log.warning("layout failed: %s", exc)
    return model


def write_scene_model(out_dir, model: SceneModel, write_debug: bool = True) -> Path:
    out = Path(out_dir)
    (out / "objects").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, o in enumerate(model.objects):
        name = f"objects/obj_{i:03d}"
        write_obj(out / f"{name}.obj", o.mesh, comment=CATEGORIES[o.class_id])
        side = {"class": CATEGORIES[o.class_id], "class_id": o.class_id, "box": o.box.as_dict(),
                "objectness": o.score, "empty_mesh": o.empty}
        atomic_write_text(out / f"{name}.json", json.dumps(side, indent=1))
        entries.append({"class": CATEGORIES[o.class_id], "class_id": o.class_id, "score": o.score,
                        "box": o.box.as_dict(), "mesh": f"{name}.obj"})
    layout_name = None
    if model.layout is not None:
        layout_name = "layout.json"
        doc = {**model.layout.as_dict(),
               "walls": [{**q.as_dict(), "score": s} for q, s in model.walls]}
        atomic_write_text(out / layout_name, json.dumps(doc, indent=1))
        write_obj(out / "layout.obj", model.layout.wall_strips(), comment="layout")
    if write_debug:
        pts, cols = [], []
        for i, o in enumerate(model.objects):
            tint = _palette(i)
            pts += [o.prior, o.anchors]
            cols += [np.tile(tint, (len(o.prior), 1)), np.tile(ANCHOR_COLOR, (len(o.anchors), 1))]
        if pts:
            p = np.concatenate(pts).reshape(-1, 3)
            c = np.concatenate(cols).reshape(-1, 3).astype(np.uint8)
            write_ply(out / "anchors.ply", PointCloud(p), colors=c)
    atomic_write_text(out / "scene.json", json.dumps({"objects": entries, "layout": layout_name}, indent=1))
    return out


def _palette(i: int):
    hue = (i * 0.618034) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.5, 0.9)
    return np.array([r, g, b]) * 255
