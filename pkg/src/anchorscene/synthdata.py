"""Procedural indoor scenes with ground truth, and simulated partial scans.

A scene is a rectangular or L-shaped room (vertical wall quads, floor at
z = 0) populated with primitive furniture. Every object is a union of closed,
non-overlapping parts so inside/outside queries can use ray parity per part.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from shapely.geometry import Polygon

from .config import CATEGORIES, SceneSpec, as_dict, dump_kv
from .geometry import (
    OrientedBox3,
    PointCloud,
    TriMesh,
    WallQuad,
    box_mesh,
    cylinder_mesh,
    points_inside_mesh,
    rotate_z,
)
from .io import atomic_write_bytes, atomic_write_text, read_obj, read_ply, write_obj, write_ply
from .layout import LayoutPolyline

WALL_ID_BASE = 100
MAX_ATTEMPTS = 1000


class SceneError(RuntimeError):
    pass


@dataclass
class ObjectInstance:
    category: str
    box: OrientedBox3
    parts: list
    score: float = 1.0

    @property
    def class_id(self) -> int:
        return CATEGORIES.index(self.category)

    @property
    def mesh(self) -> TriMesh:
        return TriMesh.concatenate(self.parts)

    def contains(self, pts) -> np.ndarray:
        inside = np.zeros(len(pts), dtype=bool)
        for part in self.parts:
            inside |= points_inside_mesh(pts, part)
        return inside


@dataclass
class Scene:
    objects: list
    walls: list
    layout: LayoutPolyline
    meta: dict = field(default_factory=dict)


def _cuboid(x0, x1, y0, y1, z0, z1) -> TriMesh:
    return box_mesh(((x0 + x1) / 2, (y0 + y1) / 2, (z0 + z1) / 2), (x1 - x0, y1 - y0, z1 - z0))


def object_parts(category: str, rng: np.random.Generator) -> list:
    """Parts of one object in its local frame, floor at z = 0, heading +x."""
    u = rng.uniform
    if category == "box-crate":
        l, w, h = u(0.4, 0.9), u(0.4, 0.7), u(0.3, 0.7)
        return [_cuboid(-l / 2, l / 2, -w / 2, w / 2, 0, h)]
    if category == "cylinder-bin":
        r, h = u(0.15, 0.25), u(0.35, 0.65)
        return [cylinder_mesh((0, 0, h / 2), r, h)]
    if category == "table":
        l, w, h = u(0.9, 1.5), u(0.6, 0.9), u(0.68, 0.78)
        t, leg, inset = 0.05, 0.06, 0.05
        parts = [_cuboid(-l / 2, l / 2, -w / 2, w / 2, h - t, h)]
        for sx in (-1, 1):
            for sy in (-1, 1):
                cx = sx * (l / 2 - inset - leg / 2)
                cy = sy * (w / 2 - inset - leg / 2)
                parts.append(_cuboid(cx - leg / 2, cx + leg / 2, cy - leg / 2, cy + leg / 2, 0, h - t))
        return parts
    if category == "chair":
        d, w, seat, top = u(0.42, 0.52), u(0.42, 0.52), u(0.42, 0.48), u(0.85, 1.0)
        back = 0.08
        return [_cuboid(-d / 2, d / 2, -w / 2, w / 2, 0, seat),
                _cuboid(-d / 2, -d / 2 + back, -w / 2, w / 2, seat, top)]
    if category == "L-sofa":
        l, d, ext = u(1.6, 2.2), u(0.8, 0.95), u(0.5, 0.8)
        seat, top, back = 0.42, u(0.78, 0.88), 0.2
        return [_cuboid(-l / 2, l / 2, -d / 2, d / 2, 0, seat),
                _cuboid(-l / 2, l / 2, -d / 2, -d / 2 + back, seat, top),
                _cuboid(l / 2 - 0.8, l / 2, d / 2, d / 2 + ext, 0, seat)]
    if category == "wall-display":
        sw, sh, thick = u(0.7, 1.2), u(0.4, 0.7), 0.06
        lift = u(0.5, 0.8)
        base_d, base_w, base_h, pole = 0.25, 0.3, 0.03, 0.06
        return [_cuboid(-base_w / 2, base_w / 2, -base_d / 2, base_d / 2, 0, base_h),
                _cuboid(-pole / 2, pole / 2, -pole / 2, pole / 2, base_h, lift),
                _cuboid(-sw / 2, sw / 2, -thick / 2, thick / 2, lift, lift + sh)]
    raise SceneError(f"unknown category {category!r}")


def _centered(parts):
    v = np.vstack([p.vertices for p in parts])
    lo, hi = v.min(0), v.max(0)
    shift = np.array([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, 0.0])
    return [TriMesh(p.vertices - shift, p.triangles) for p in parts], hi - lo


def room_corners(width, depth, notch=None) -> np.ndarray:
    """Counter-clockwise floor corners; ``notch=(a, b)`` cuts the (+x, +y) corner."""
    hw, hd = width / 2, depth / 2
    if notch is None:
        return np.array([[-hw, -hd], [hw, -hd], [hw, hd], [-hw, hd]])
    a, b = notch
    return np.array([[-hw, -hd], [hw, -hd], [hw, hd - b], [hw - a, hd - b], [hw - a, hd], [-hw, hd]])


def walls_from_corners(corners2d, height) -> list:
    walls = []
    for i in range(len(corners2d)):
        p, q = corners2d[i], corners2d[(i + 1) % len(corners2d)]
        mid = (p + q) / 2
        walls.append(WallQuad((mid[0], mid[1], height / 2), math.atan2(q[1] - p[1], q[0] - p[0]),
                              float(np.linalg.norm(q - p)), height))
    return walls


def generate_scene(spec: SceneSpec, seed: int) -> Scene:
    rng = np.random.default_rng([spec.rng_seed, seed, 0])
    width = rng.uniform(*spec.room_width)
    depth = rng.uniform(*spec.room_depth)
    height = rng.uniform(*spec.wall_height)
    notch = None
    if rng.random() < spec.l_shape_prob:
        notch = (rng.uniform(0.3, 0.45) * width, rng.uniform(0.3, 0.45) * depth)
    c2 = room_corners(width, depth, notch)
    walls = walls_from_corners(c2, height)
    layout = LayoutPolyline(np.column_stack([c2, np.zeros(len(c2))]), True,
                            [(0.0, height)] * len(c2))

    free = Polygon(c2).buffer(-spec.wall_margin, join_style=2)
    n_obj = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    objects, footprints = [], []
    lo, hi = c2.min(0), c2.max(0)
    for _ in range(n_obj):
        for attempt in range(MAX_ATTEMPTS):
            if attempt % 100 == 0:  # redraw the object when it keeps failing to fit
                cat = spec.categories[int(rng.integers(len(spec.categories)))]
                parts, ext = _centered(object_parts(cat, rng))
            yaw = rng.uniform(-math.pi, math.pi)
            cx, cy = rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1])
            box = OrientedBox3((cx, cy, ext[2] / 2), ext, yaw)
            fp = Polygon(box.corners_bev())
            if not free.contains(fp):
                continue
            if any(fp.distance(o) < spec.clearance for o in footprints):
                continue
            break
        else:
            raise SceneError("scene too dense")
        placed = [TriMesh(rotate_z(p.vertices, box.yaw) + [cx, cy, 0.0], p.triangles) for p in parts]
        objects.append(ObjectInstance(cat, box, placed))
        footprints.append(fp)
    return Scene(objects, walls, layout, {"seed": seed, "width": width, "depth": depth,
                                          "height": height, "l_shaped": notch is not None})


def simulate_partial_scan(scene: Scene, spec: SceneSpec, seed: int):
    """Area-weighted surface samples with bottom culling, sector occlusion and
    Gaussian noise. Returns ``(PointCloud, instance_ids)``; the ids are a
    test-only side channel (objects 0..n-1, walls 100+k)."""
    rng = np.random.default_rng([spec.rng_seed, seed, 1])
    tri_a, tri_b, tri_c, ids = [], [], [], []

    def add(mesh, inst, cull):
        v, t = mesh.vertices, mesh.triangles
        a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        if cull:
            n = np.cross(b - a, c - a)
            n /= np.linalg.norm(n, axis=1, keepdims=True)
            keep = n[:, 2] >= -0.9
            a, b, c = a[keep], b[keep], c[keep]
        tri_a.append(a)
        tri_b.append(b)
        tri_c.append(c)
        ids.append(np.full(len(a), inst))

    for i, obj in enumerate(scene.objects):
        for part in obj.parts:
            add(part, i, spec.bottom_cull)
    for k, wall in enumerate(scene.walls):
        add(wall.mesh(), WALL_ID_BASE + k, False)
    A, B, C = (np.concatenate(x) for x in (tri_a, tri_b, tri_c))
    tid = np.concatenate(ids)
    areas = 0.5 * np.linalg.norm(np.cross(B - A, C - A), axis=1)
    n = int(round(spec.points_per_m2 * areas.sum()))
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    su, v = np.sqrt(rng.random(n)), rng.random(n)
    pts = ((1 - su)[:, None] * A[face] + (su * (1 - v))[:, None] * B[face]
           + (su * v)[:, None] * C[face])
    inst = tid[face]

    corners = scene.layout.corners[:, :2]
    lo, hi = corners.min(0), corners.max(0)
    view = rng.uniform(lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo))
    keep = np.ones(n, dtype=bool)
    az = np.arctan2(pts[:, 1] - view[1], pts[:, 0] - view[0])
    half = math.radians(spec.sector_deg) / 2
    for _ in range(spec.occlusion_sectors):
        mid = rng.uniform(-math.pi, math.pi)
        diff = np.abs((az - mid + math.pi) % (2 * math.pi) - math.pi)
        keep &= diff > half
    pts, inst = pts[keep], inst[keep]
    if spec.noise_sigma > 0:
        pts = pts + rng.normal(scale=spec.noise_sigma, size=pts.shape)
    return PointCloud(pts), inst.astype(np.int32)


# ---------------------------------------------------------------------------
# Dataset layout on disk
# ---------------------------------------------------------------------------

def write_scene(scene_dir, scene: Scene, scan: PointCloud | None = None, instance_ids=None):
    scene_dir = Path(scene_dir)
    gt = scene_dir / "gt"
    (gt / "meshes").mkdir(parents=True, exist_ok=True)
    if scan is not None:
        write_ply(scene_dir / "scan.ply", scan)
    if instance_ids is not None:
        atomic_write_bytes(gt / "instance_ids.bin", np.asarray(instance_ids, "<i4").tobytes())
    entries = []
    for i, obj in enumerate(scene.objects):
        name = f"meshes/obj_{i:03d}.obj"
        write_obj(gt / name, obj.mesh, comment=obj.category)
        entries.append({"id": i, "class": obj.category, "class_id": obj.class_id,
                        "box": obj.box.as_dict(), "score": obj.score, "mesh": name,
                        "parts": [len(p) for p in obj.parts]})
    atomic_write_text(gt / "boxes.json", json.dumps({"objects": entries, "meta": scene.meta}, indent=1))
    atomic_write_text(gt / "layout.json", json.dumps(
        {**scene.layout.as_dict(), "walls": [w.as_dict() for w in scene.walls]}, indent=1))


def read_scene(scene_dir) -> Scene:
    gt = Path(scene_dir) / "gt"
    doc = json.loads((gt / "boxes.json").read_text())
    objects = []
    for e in doc["objects"]:
        mesh = read_obj(gt / e["mesh"])
        parts, off = [], 0
        for cnt in e.get("parts", [len(mesh)]):
            tri = mesh.triangles[off:off + cnt]
            used, local = np.unique(tri, return_inverse=True)
            parts.append(TriMesh(mesh.vertices[used], local.reshape(tri.shape)))
            off += cnt
        objects.append(ObjectInstance(e["class"], OrientedBox3.from_dict(e["box"]), parts,
                                      e.get("score", 1.0)))
    lay = json.loads((gt / "layout.json").read_text())
    walls = [WallQuad.from_dict(w) for w in lay.get("walls", [])]
    return Scene(objects, walls, LayoutPolyline.from_dict(lay), doc.get("meta", {}))


def read_scan(scene_dir) -> PointCloud:
    return read_ply(Path(scene_dir) / "scan.ply")


def read_instance_ids(scene_dir) -> np.ndarray:
    return np.frombuffer((Path(scene_dir) / "gt" / "instance_ids.bin").read_bytes(), "<i4").copy()


def generate_corpus(spec: SceneSpec, count: int, out_dir, first_seed: int = 0) -> Path:
    out = Path(out_dir)
    seeds = list(range(first_seed, first_seed + count))
    ids = []
    for s in seeds:
        scene = generate_scene(spec, s)
        scan, inst = simulate_partial_scan(scene, spec, s)
        sid = f"{s:05d}"
        write_scene(out / "scenes" / sid, scene, scan, inst)
        ids.append(sid)
    manifest = {"spec": as_dict(spec), "spec_text": dump_kv(spec), "seeds": seeds, "scenes": ids}
    atomic_write_text(out / "corpus.json", json.dumps(manifest, indent=1))
    return out


def load_corpus(corpus_dir) -> list:
    corpus_dir = Path(corpus_dir)
    manifest = corpus_dir / "corpus.json"
    if not manifest.is_file():
        raise FileNotFoundError(f"corpus manifest not found: {manifest}")
    doc = json.loads(manifest.read_text())
    return [corpus_dir / "scenes" / sid for sid in doc["scenes"]]
