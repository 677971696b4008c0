"""Room layout from detected wall quads: merge duplicates, order the walls
around the room and intersect neighbours to get the corner polyline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import TriMesh, WallQuad


class LayoutError(ValueError):
    pass


@dataclass
class LayoutPolyline:
    corners: np.ndarray
    closed: bool = True
    heights: list = field(default_factory=list)

    def __post_init__(self):
        self.corners = np.asarray(self.corners, dtype=np.float64).reshape(-1, 3)
        if self.closed and len(self.corners) < 3:
            raise LayoutError("a closed layout needs at least 3 corners")
        if len(self.corners) > 1:
            steps = np.linalg.norm(np.diff(self.corners, axis=0), axis=1)
            if np.any(steps <= 1e-6):
                raise LayoutError("consecutive corners must be distinct")
        if not self.heights:
            self.heights = [(0.0, 0.0)] * len(self.corners)

    def as_dict(self) -> dict:
        return {"corners": self.corners.tolist(), "closed": self.closed,
                "heights": [list(h) for h in self.heights]}

    @classmethod
    def from_dict(cls, d) -> "LayoutPolyline":
        return cls(np.array(d["corners"], dtype=np.float64).reshape(-1, 3), d["closed"],
                   [tuple(h) for h in d.get("heights", [])])

    def wall_strips(self) -> TriMesh:
        """One vertical quad per layout edge, spanning the corner height ranges."""
        k = len(self.corners)
        n_edges = k if self.closed else k - 1
        verts, tris = [], []
        for i in range(n_edges):
            j = (i + 1) % k
            z0 = min(self.heights[i][0], self.heights[j][0])
            z1 = max(self.heights[i][1], self.heights[j][1])
            if z1 <= z0:
                continue
            p, q = self.corners[i], self.corners[j]
            base = len(verts)
            verts += [[p[0], p[1], z0], [q[0], q[1], z0], [q[0], q[1], z1], [p[0], p[1], z1]]
            tris += [[base, base + 1, base + 2], [base, base + 2, base + 3]]
        return TriMesh(np.array(verts).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))


def _line_distance(a: WallQuad, b: WallQuad) -> float:
    """Symmetric distance between each wall's center and the other's infinite line."""
    def dist(p, w):
        d = w.direction()
        r = np.array(p[:2]) - np.array(w.center[:2])
        return abs(r[0] * d[1] - r[1] * d[0])
    return max(dist(a.center, b), dist(b.center, a))


def _yaw_gap(a: float, b: float) -> float:
    """Angle between two undirected lines, in [0, pi/2]."""
    d = abs(a - b) % math.pi
    return min(d, math.pi - d)


def _merge_group(walls, weights) -> WallQuad:
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum() if w.sum() > 0 else np.full(len(walls), 1.0 / len(walls))
    ref = walls[0].direction()
    dirs = []
    for q in walls:
        d = q.direction()
        dirs.append(d if d @ ref >= 0 else -d)
    d = (np.array(dirs) * w[:, None]).sum(0)
    center = (np.array([q.center for q in walls]) * w[:, None]).sum(0)
    width = float(sum(wi * q.width for wi, q in zip(w, walls)))
    height = float(sum(wi * q.height for wi, q in zip(w, walls)))
    return WallQuad(center, math.atan2(d[1], d[0]), width, height)


def merge_walls(walls, scores=None, merge_angle_deg: float = 15.0, merge_dist: float = 0.3):
    """Greedy confidence-ordered merging of near-duplicate walls."""
    scores = [1.0] * len(walls) if scores is None else list(scores)
    cen = np.array([w.center[:2] for w in walls])
    mid = cen.mean(0)
    polar = np.arctan2(cen[:, 1] - mid[1], cen[:, 0] - mid[0])
    order = sorted(range(len(walls)), key=lambda i: (-scores[i], polar[i], cen[i, 0], cen[i, 1]))
    groups = []
    max_gap = math.radians(merge_angle_deg)
    for i in order:
        for g in groups:
            rep = g["rep"]
            if _yaw_gap(rep.yaw, walls[i].yaw) < max_gap and _line_distance(rep, walls[i]) < merge_dist:
                g["members"].append(i)
                g["rep"] = _merge_group([walls[j] for j in g["members"]], [scores[j] for j in g["members"]])
                break
        else:
            groups.append({"members": [i], "rep": walls[i]})
    merged = [g["rep"] for g in groups]
    conf = [max(scores[j] for j in g["members"]) for g in groups]
    return merged, conf


def _intersect(a: WallQuad, b: WallQuad):
    p, d = np.array(a.center[:2]), a.direction()
    q, e = np.array(b.center[:2]), b.direction()
    den = d[0] * e[1] - d[1] * e[0]
    t = ((q[0] - p[0]) * e[1] - (q[1] - p[1]) * e[0]) / den
    return p + t * d


def _facing_midpoint(a: WallQuad, b: WallQuad):
    ea, eb = a.endpoints_bev(), b.endpoints_bev()
    d = np.linalg.norm(ea[:, None] - eb[None], axis=2)
    i, j = np.unravel_index(np.argmin(d), d.shape)
    return (ea[i] + eb[j]) / 2


def quads_to_corners(walls, scores=None, merge_angle_deg: float = 15.0, merge_dist: float = 0.3,
                     closed: bool = True, parallel_deg: float = 5.0) -> LayoutPolyline:
    if len(walls) < 2:
        raise LayoutError("insufficient walls")
    merged, _ = merge_walls(walls, scores, merge_angle_deg, merge_dist)
    if len(merged) < 2:
        raise LayoutError("insufficient walls")
    cen = np.array([w.center[:2] for w in merged])
    mid = cen.mean(0)
    polar = np.arctan2(cen[:, 1] - mid[1], cen[:, 0] - mid[0])
    order = sorted(range(len(merged)), key=lambda i: (polar[i], cen[i, 0], cen[i, 1]))
    ws = [merged[i] for i in order]
    n = len(ws)
    if n == 2:
        closed = False
    pairs = [(i, (i + 1) % n) for i in range(n if closed else n - 1)]
    corners, heights = [], []
    for i, j in pairs:
        a, b = ws[i], ws[j]
        if _yaw_gap(a.yaw, b.yaw) < math.radians(parallel_deg):
            xy = _facing_midpoint(a, b)
        else:
            xy = _intersect(a, b)
        za, zb = a.z_range(), b.z_range()
        corner = np.array([xy[0], xy[1], 0.0])
        if corners and np.linalg.norm(corner - corners[-1]) <= 1e-6:
            continue
        corners.append(corner)
        heights.append((min(za[0], zb[0]), max(za[1], zb[1])))
    if closed and len(corners) > 1 and np.linalg.norm(corners[0] - corners[-1]) <= 1e-6:
        corners.pop()
        heights.pop()
    if closed and len(corners) < 3:
        closed = False
    return LayoutPolyline(np.array(corners).reshape(-1, 3), closed, heights)
