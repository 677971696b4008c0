"""Point-set, box and mesh primitives shared by the detector, the shape
decoder and the evaluator.

All distances are in meters. Randomized helpers take explicit seeds and every
tie is broken towards the lowest index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree


class GeometryError(ValueError):
    pass


def _as_points(p) -> np.ndarray:
    if isinstance(p, PointCloud):
        return p.points
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        return arr.reshape(0, 3)
    return arr.reshape(-1, 3)


@dataclass
class PointCloud:
    points: np.ndarray
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("point coordinates must be finite")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim == 1:
                self.features = self.features.reshape(-1, 1)
            if self.features.shape[0] != self.points.shape[0]:
                raise GeometryError(
                    f"feature rows ({self.features.shape[0]}) != point count ({len(self.points)})")

    def __len__(self):
        return self.points.shape[0]

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        feats = None if self.features is None else self.features[idx]
        return PointCloud(self.points[idx], feats)


def normalize_angle(a: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    a = (float(a) + math.pi) % (2.0 * math.pi) - math.pi
    if a >= math.pi:  # float rounding at the upper edge
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class OrientedBox3:
    """Yaw-only oriented box; ``size`` is (length along heading, width, height)."""

    center: tuple
    size: tuple
    yaw: float = 0.0

    def __post_init__(self):
        c = tuple(float(v) for v in np.asarray(self.center, dtype=np.float64).reshape(3))
        s = tuple(float(v) for v in np.asarray(self.size, dtype=np.float64).reshape(3))
        if min(s) <= 0:
            raise GeometryError(f"box size must be strictly positive, got {s}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    def corners_bev(self) -> np.ndarray:
        """Footprint corners, counter-clockwise, shape (4, 2)."""
        l, w, _ = self.size
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[-l, -w], [l, -w], [l, w], [-l, w]]) * 0.5
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.center[:2])

    def z_range(self):
        h = self.size[2] * 0.5
        return self.center[2] - h, self.center[2] + h

    def volume(self) -> float:
        return self.size[0] * self.size[1] * self.size[2]

    def to_local(self, pts) -> np.ndarray:
        pts = _as_points(pts) - np.array(self.center)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        x = c * pts[:, 0] + s * pts[:, 1]
        y = -s * pts[:, 0] + c * pts[:, 1]
        return np.stack([x, y, pts[:, 2]], axis=1)

    def contains(self, pts, margin: float = 0.0) -> np.ndarray:
        loc = self.to_local(pts)
        half = np.array(self.size) * 0.5 + margin
        return np.all(np.abs(loc) <= half, axis=1)

    def as_dict(self) -> dict:
        return {"center": list(self.center), "size": list(self.size), "yaw": self.yaw}

    @classmethod
    def from_dict(cls, d) -> "OrientedBox3":
        return cls(d["center"], d["size"], d["yaw"])


@dataclass
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        tris = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if tris.size and (tris.min() < 0 or tris.max() >= len(self.vertices)):
            raise GeometryError("triangle index out of range")
        if tris.size:
            tris = tris[_triangle_areas(self.vertices, tris) > 1e-14]
        self.triangles = tris

    def __len__(self):
        return self.triangles.shape[0]

    def is_empty(self) -> bool:
        return self.triangles.shape[0] == 0

    def areas(self) -> np.ndarray:
        return _triangle_areas(self.vertices, self.triangles)

    def volume(self) -> float:
        """Signed volume via the divergence theorem (outward-oriented faces give > 0)."""
        if self.is_empty():
            return 0.0
        v0, v1, v2 = (self.vertices[self.triangles[:, k]] for k in range(3))
        return float(np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum() / 6.0)

    def transformed(self, fn) -> "TriMesh":
        return TriMesh(fn(self.vertices), self.triangles.copy())

    @staticmethod
    def concatenate(meshes: Sequence["TriMesh"]) -> "TriMesh":
        verts, tris, off = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + off)
            off += len(m.vertices)
        if not verts:
            return TriMesh(np.zeros((0, 3)))
        return TriMesh(np.concatenate(verts), np.concatenate(tris))


def _triangle_areas(v, t) -> np.ndarray:
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


# ---------------------------------------------------------------------------
# Chamfer distance
# ---------------------------------------------------------------------------

def chamfer_distance(P, Q) -> float:
    """Symmetric mean of squared nearest-neighbour distances."""
    p, q = _as_points(P), _as_points(Q)
    if len(p) == 0 or len(q) == 0:
        raise GeometryError("empty point set")
    d_pq, _ = cKDTree(q).query(p)
    d_qp, _ = cKDTree(p).query(q)
    return float(np.mean(d_pq ** 2) + np.mean(d_qp ** 2))


def chamfer_with_grad(P, Q):
    """Chamfer distance and its gradient with respect to the points of ``P``.

    Dense pairwise evaluation; meant for the small anchor sets used in
    training (a few dozen points against a few hundred).
    """
    p, q = _as_points(P), _as_points(Q)
    if len(p) == 0 or len(q) == 0:
        raise GeometryError("empty point set")
    diff = p[:, None, :] - q[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    nn_pq = np.argmin(d2, axis=1)  # first minimum -> lowest index
    nn_qp = np.argmin(d2, axis=0)
    rows = np.arange(len(p))
    cols = np.arange(len(q))
    value = d2[rows, nn_pq].mean() + d2[nn_qp, cols].mean()
    grad = 2.0 * (p - q[nn_pq]) / len(p)
    back = 2.0 * (p[nn_qp] - q) / len(q)
    np.add.at(grad, nn_qp, back)
    return float(value), grad


# ---------------------------------------------------------------------------
# Templates and sampling
# ---------------------------------------------------------------------------

def sphere_template(n: int) -> PointCloud:
    """``n`` points on the unit sphere by the Fibonacci (golden-angle) spiral."""
    if n < 1:
        raise GeometryError("template needs at least one point")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    theta = math.pi * (3.0 - math.sqrt(5.0)) * i
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return PointCloud(pts)


def farthest_point_sample(pc, k: int, seed_index: int = 0) -> np.ndarray:
    pts = _as_points(pc)
    n = len(pts)
    if k > n:
        raise GeometryError(f"cannot sample {k} points from {n}")
    out = np.empty(k, dtype=np.int64)
    if k == 0:
        return out
    out[0] = seed_index
    mind = np.full(n, np.inf)
    last = seed_index
    for i in range(1, k):
        d = pts - pts[last]
        mind = np.minimum(mind, np.einsum("ij,ij->i", d, d))
        last = int(np.argmax(mind))
        out[i] = last
    return out


def lexicographic_min_index(pc) -> int:
    """Index of the lexicographically smallest (x, then y, then z) point."""
    pts = _as_points(pc)
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    return int(order[0])


def ball_query(pc, center, radius: float, max_count: int) -> np.ndarray:
    if radius <= 0:
        raise GeometryError("radius must be positive")
    pts = _as_points(pc)
    d2 = np.sum((pts - np.asarray(center, dtype=np.float64)) ** 2, axis=1)
    inside = np.flatnonzero(d2 <= radius * radius)
    order = np.lexsort((inside, d2[inside]))
    return inside[order[:max_count]]


def ball_query_batch(pts: np.ndarray, centers: np.ndarray, radius: float, max_count: int):
    """Vectorized ball query for many centers.

    Returns ``(idx, count)`` where ``idx`` has shape (M, max_count); rows with
    fewer hits are padded by repeating their nearest hit, which keeps max
    pooling exact. ``count`` holds the true number of hits per row.
    """
    d2 = (np.sum(centers ** 2, axis=1)[:, None] + np.sum(pts ** 2, axis=1)[None, :]
          - 2.0 * centers @ pts.T)
    # exact recomputation only for the candidates that pass a loose filter
    r2 = radius * radius
    m = len(centers)
    idx = np.zeros((m, max_count), dtype=np.int64)
    count = np.zeros(m, dtype=np.int64)
    for i in range(m):
        cand = np.flatnonzero(d2[i] <= r2 + 1e-9)
        exact = np.sum((pts[cand] - centers[i]) ** 2, axis=1)
        keep = exact <= r2
        cand, exact = cand[keep], exact[keep]
        order = np.lexsort((cand, exact))[:max_count]
        hits = cand[order]
        count[i] = len(hits)
        if len(hits) == 0:
            continue
        idx[i, :len(hits)] = hits
        idx[i, len(hits):] = hits[0]
    return idx, count


def knn(src: np.ndarray, dst: np.ndarray, k: int):
    """k nearest sources for every destination point; ties by lowest index."""
    k = min(k, len(src))
    diff = dst[:, None, :] - src[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(d2, order, axis=1)


def interpolation_weights(src_pts: np.ndarray, dst_pts: np.ndarray, k: int = 3, eps: float = 1e-9):
    """Neighbour indices and inverse-squared-distance weights (rows sum to 1)."""
    if len(src_pts) < 1:
        raise GeometryError("interpolation needs at least one source point")
    idx, d2 = knn(src_pts, dst_pts, k)
    exact = np.sqrt(d2[:, 0]) < eps
    inv = 1.0 / np.maximum(d2, 1e-300)
    w = inv / inv.sum(axis=1, keepdims=True)
    w[exact] = 0.0
    w[exact, 0] = 1.0
    return idx, w, d2, exact


def interpolate_features(src: PointCloud, dst_points, k: int = 3) -> np.ndarray:
    if src.features is None:
        raise GeometryError("source cloud carries no features")
    dst = _as_points(dst_points)
    idx, w, _, _ = interpolation_weights(src.points, dst, k)
    return np.einsum("ik,ikc->ic", w, src.features[idx])


def sample_mesh_surface(mesh: TriMesh, n: int, rng_seed, return_faces: bool = False):
    if mesh.is_empty():
        raise GeometryError("cannot sample an empty mesh")
    rng = np.random.default_rng(rng_seed)
    areas = mesh.areas()
    faces = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u, v = rng.random(n), rng.random(n)
    su = np.sqrt(u)
    a, b, c = (mesh.vertices[mesh.triangles[faces, k]] for k in range(3))
    pts = (1 - su)[:, None] * a + (su * (1 - v))[:, None] * b + (su * v)[:, None] * c
    pc = PointCloud(pts)
    return (pc, faces) if return_faces else pc


def points_to_mesh_distance(pts, mesh: TriMesh) -> np.ndarray:
    """Unsigned distance from each point to the closest triangle (brute force)."""
    p = _as_points(pts)
    a = mesh.vertices[mesh.triangles[:, 0]][None]
    b = mesh.vertices[mesh.triangles[:, 1]][None]
    c = mesh.vertices[mesh.triangles[:, 2]][None]
    out = np.empty(len(p))
    step = max(1, 2_000_000 // max(1, len(mesh.triangles)))  # bound the (points, tris) temporaries
    for s in range(0, len(p), step):
        chunk = p[s:s + step, None, :]
        q = _closest_on_triangles(chunk, a, b, c)
        out[s:s + step] = np.sqrt(np.min(np.sum((q - chunk) ** 2, axis=2), axis=1))
    return out


def _closest_on_triangles(p, a, b, c):
    # Ericson, Real-Time Collision Detection, 5.1.5; broadcast over (points, tris)
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.sum(ab * ap, -1)
    d2 = np.sum(ac * ap, -1)
    bp = p - b
    d3 = np.sum(ab * bp, -1)
    d4 = np.sum(ac * bp, -1)
    cp = p - c
    d5 = np.sum(ab * cp, -1)
    d6 = np.sum(ac * cp, -1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        out = a + ab * v[..., None] + ac * w[..., None]
        # edge regions
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    e_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    e_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    e_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    out = np.where(e_bc[..., None], b + (c - b) * t_bc[..., None], out)
    out = np.where(e_ac[..., None], a + ac * t_ac[..., None], out)
    out = np.where(e_ab[..., None], a + ab * t_ab[..., None], out)
    # vertex regions
    out = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, out)
    out = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, out)
    return np.broadcast_to(out, np.broadcast_shapes(p.shape, a.shape)).copy()


def points_inside_mesh(pts, mesh: TriMesh) -> np.ndarray:
    """Ray-parity inside test against a closed mesh."""
    p = _as_points(pts)
    if mesh.is_empty() or len(p) == 0:
        return np.zeros(len(p), dtype=bool)
    direction = np.array([1.0, 0.0123, 0.00771])
    direction /= np.linalg.norm(direction)
    v0 = mesh.vertices[mesh.triangles[:, 0]]
    e1 = mesh.vertices[mesh.triangles[:, 1]] - v0
    e2 = mesh.vertices[mesh.triangles[:, 2]] - v0
    h = np.cross(direction, e2)
    a = np.einsum("ij,ij->i", e1, h)
    ok = np.abs(a) > 1e-15
    v0, e1, e2, h, a = v0[ok], e1[ok], e2[ok], h[ok], a[ok]
    f = 1.0 / a
    hits = np.zeros(len(p), dtype=np.int64)
    for start in range(0, len(p), 4096):
        s = p[start:start + 4096, None, :] - v0[None]
        u = f * np.einsum("ntk,tk->nt", s, h)
        q = np.cross(s, e1[None])
        v = f * (q @ direction)
        t = f * np.einsum("ntk,tk->nt", q, e2)
        hit = (u >= 0) & (u <= 1) & (v >= 0) & (u + v <= 1) & (t > 1e-12)
        hits[start:start + 4096] = hit.sum(axis=1)
    return hits % 2 == 1


# ---------------------------------------------------------------------------
# Rotated box IoU
# ---------------------------------------------------------------------------

def _clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon by a convex CCW polygon."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, out = out, []
        s = inp[-1]
        ss = side(s)
        for e in inp:
            se = side(e)
            if se >= 0:
                if ss < 0:
                    t = ss / (ss - se)
                    out.append((s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])))
                out.append(e)
            elif ss >= 0:
                t = ss / (ss - se)
                out.append((s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])))
            s, ss = e, se
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def oriented_iou(a: OrientedBox3, b: OrientedBox3) -> float:
    if a == b:
        return 1.0
    za0, za1 = a.z_range()
    zb0, zb1 = b.z_range()
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0:
        return 0.0
    # cheap circumscribed-circle rejection
    ra = 0.5 * math.hypot(a.size[0], a.size[1])
    rb = 0.5 * math.hypot(b.size[0], b.size[1])
    if math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) >= ra + rb:
        return 0.0
    inter_area = polygon_area(_clip_convex(a.corners_bev(), b.corners_bev()))
    inter = inter_area * dz
    union = a.volume() + b.volume() - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


# ---------------------------------------------------------------------------
# Mesh primitives used by the synthetic scenes and tests
# ---------------------------------------------------------------------------

def box_mesh(center, size, yaw: float = 0.0) -> TriMesh:
    """Closed cuboid with outward-facing triangles."""
    l, w, h = (float(s) * 0.5 for s in size)
    v = np.array([[-l, -w, -h], [l, -w, -h], [l, w, -h], [-l, w, -h],
                  [-l, -w, h], [l, -w, h], [l, w, h], [-l, w, h]])
    t = np.array([[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
                  [0, 1, 5], [0, 5, 4], [1, 2, 6], [1, 6, 5],
                  [2, 3, 7], [2, 7, 6], [3, 0, 4], [3, 4, 7]])
    return TriMesh(rotate_z(v, yaw) + np.asarray(center, dtype=np.float64), t)


def cylinder_mesh(center, radius: float, height: float, segments: int = 16) -> TriMesh:
    ang = 2.0 * math.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    h = height * 0.5
    bottom = np.column_stack([ring, np.full(segments, -h)])
    top = np.column_stack([ring, np.full(segments, h)])
    verts = np.vstack([bottom, top, [[0, 0, -h], [0, 0, h]]])
    cb, ct = 2 * segments, 2 * segments + 1
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris += [[i, j, segments + j], [i, segments + j, segments + i],
                 [cb, j, i], [ct, segments + i, segments + j]]
    return TriMesh(verts + np.asarray(center, dtype=np.float64), np.array(tris))


def rotate_z(pts, yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    p = _as_points(pts)
    return np.column_stack([c * p[:, 0] - s * p[:, 1], s * p[:, 0] + c * p[:, 1], p[:, 2]])


def rigid_transform(pts, yaw: float, translation) -> np.ndarray:
    return rotate_z(pts, yaw) + np.asarray(translation, dtype=np.float64)


@dataclass(frozen=True)
class WallQuad:
    """Vertical planar wall rectangle; ``yaw`` is the direction along the wall."""

    center: tuple
    yaw: float
    width: float
    height: float

    def __post_init__(self):
        object.__setattr__(self, "center",
                           tuple(float(v) for v in np.asarray(self.center, dtype=np.float64).reshape(3)))
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("wall width and height must be positive")
        object.__setattr__(self, "width", float(self.width))
        object.__setattr__(self, "height", float(self.height))
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    def direction(self) -> np.ndarray:
        return np.array([math.cos(self.yaw), math.sin(self.yaw)])

    def endpoints_bev(self) -> np.ndarray:
        d = self.direction() * self.width * 0.5
        c = np.array(self.center[:2])
        return np.stack([c - d, c + d])

    def z_range(self):
        return self.center[2] - self.height * 0.5, self.center[2] + self.height * 0.5

    def mesh(self) -> TriMesh:
        (x0, y0), (x1, y1) = self.endpoints_bev()
        z0, z1 = self.z_range()
        v = [[x0, y0, z0], [x1, y1, z0], [x1, y1, z1], [x0, y0, z1]]
        return TriMesh(v, [[0, 1, 2], [0, 2, 3]])

    def as_dict(self) -> dict:
        return {"center": list(self.center), "yaw": self.yaw, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d) -> "WallQuad":
        return cls(d["center"], d["yaw"], d["width"], d["height"])
