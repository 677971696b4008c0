"""Dual-branch set-abstraction encoder.

Each branch is two set-abstraction levels: farthest-point centroids, ball
grouping, a shared per-point network over (relative position / radius,
point features) and channel-wise max pooling. Groupings depend only on the
scan, so they are computed once per scene and reused by both branches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    GeometryError,
    PointCloud,
    ball_query_batch,
    farthest_point_sample,
    lexicographic_min_index,
)
from .nnet import DenseNet


@dataclass
class SeedSet:
    positions: PointCloud
    features: np.ndarray

    def __post_init__(self):
        if len(self.positions) != len(self.features):
            raise GeometryError("seed positions and features disagree in count")

    def __len__(self):
        return len(self.positions)


@dataclass
class Grouping:
    """Centroid indices into the level input and padded neighbour lists."""

    centroids: np.ndarray
    groups: np.ndarray
    counts: np.ndarray
    radius: float


def make_grouping(points: np.ndarray, n_centroids: int, radius: float, nsample: int) -> Grouping:
    if n_centroids > len(points):
        raise GeometryError(f"cannot pick {n_centroids} centroids from {len(points)} points")
    cidx = farthest_point_sample(points, n_centroids, lexicographic_min_index(points))
    groups, counts = ball_query_batch(points, points[cidx], radius, nsample)
    empty = counts == 0
    groups[empty] = cidx[empty, None]  # fall back to the centroid alone
    return Grouping(cidx, groups, counts, radius)


def sa_forward(points, feats, grouping: Grouping, net: DenseNet):
    """Returns ``(centroid features, cache)``."""
    g = grouping.groups
    m, k = g.shape
    rel = (points[g] - points[grouping.centroids][:, None, :]) / grouping.radius
    parts = [rel.reshape(m * k, 3)]
    if feats is not None:
        parts.append(feats[g].reshape(m * k, -1))
    out, cache = net.run(np.concatenate(parts, axis=1))
    out = out.reshape(m, k, -1)
    arg = np.argmax(out, axis=1)
    pooled = np.take_along_axis(out, arg[:, None, :], axis=1)[:, 0, :]
    return pooled, (cache, arg, grouping, None if feats is None else feats.shape)


def sa_backward(net: DenseNet, saved, grad_pooled):
    """Returns ``(GradTape, gradient w.r.t. input features or None)``."""
    cache, arg, grouping, fshape = saved
    m, k = grouping.groups.shape
    d = grad_pooled.shape[1]
    g_out = np.zeros((m, k, d))
    np.put_along_axis(g_out, arg[:, None, :], grad_pooled[:, None, :], axis=1)
    tape, g_in = net.backward(g_out.reshape(m * k, d), cache)
    if fshape is None:
        return tape, None
    g_feat = np.zeros(fshape)
    np.add.at(g_feat, grouping.groups.reshape(-1), g_in[:, 3:])
    return tape, g_feat


def set_abstraction(pc: PointCloud, n_centroids: int, radius: float, per_point_net: DenseNet,
                    nsample: int = 32) -> SeedSet:
    grouping = make_grouping(pc.points, n_centroids, radius, nsample)
    feats, _ = sa_forward(pc.points, pc.features, grouping, per_point_net)
    return SeedSet(PointCloud(pc.points[grouping.centroids]), feats)


def scan_features(points: np.ndarray) -> np.ndarray:
    """Per-point input feature: height above the floor plane z = 0."""
    return points[:, 2:3].copy()


@dataclass
class BackboneGroups:
    level1: Grouping
    level2: Grouping
    points1: np.ndarray
    points2: np.ndarray


def prepare_groups(points: np.ndarray, cfg) -> BackboneGroups:
    if len(points) < cfg.min_scan_points:
        raise GeometryError(f"insufficient points: {len(points)} < {cfg.min_scan_points}")
    g1 = make_grouping(points, cfg.sa1_centroids, cfg.sa1_radius, cfg.sa1_nsample)
    p1 = points[g1.centroids]
    g2 = make_grouping(p1, cfg.sa2_centroids, cfg.sa2_radius, cfg.sa2_nsample)
    return BackboneGroups(g1, g2, p1, p1[g2.centroids])


def make_backbone_nets(cfg, seed: int):
    act = cfg.hidden_activation
    d, h = cfg.feature_dim, cfg.sa1_hidden
    sa1 = DenseNet([4, h, h, d], act, seed=seed)
    sa2 = DenseNet([3 + d, d, d, d], act, seed=seed + 1)
    return sa1, sa2


def encode_branch(points, groups: BackboneGroups, sa1: DenseNet, sa2: DenseNet):
    f1, c1 = sa_forward(points, scan_features(points), groups.level1, sa1)
    f2, c2 = sa_forward(groups.points1, f1, groups.level2, sa2)
    return f2, (c1, c2)


def encode_branch_backward(sa1, sa2, saved, grad_seed_feats):
    c1, c2 = saved
    t2, g_f1 = sa_backward(sa2, c2, grad_seed_feats)
    t1, _ = sa_backward(sa1, c1, g_f1)
    return t1, t2


def dual_branch_encode(scan: PointCloud, obj_nets, wall_nets, cfg):
    """Run both branches; returns ``(object SeedSet, wall SeedSet)``."""
    groups = prepare_groups(scan.points, cfg)
    out = []
    for sa1, sa2 in (obj_nets, wall_nets):
        feats, _ = encode_branch(scan.points, groups, sa1, sa2)
        out.append(SeedSet(PointCloud(groups.points2.copy()), feats))
    return tuple(out)
