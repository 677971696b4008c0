"""Shape anchors: deformation, supervision, feature grouping and point sampling.

A fixed unit-sphere template is deformed per candidate by a small network of
(template point, candidate feature); the offsets are squashed by tanh and the
result is translated to the cluster center. The deformed anchors gather seed
features by 3-NN interpolation and pick up nearby scan points as a geometry
prior for shape decoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .backbone import SeedSet
from .geometry import PointCloud, chamfer_distance, chamfer_with_grad, interpolation_weights
from .nnet import DenseNet, NetError


@dataclass
class AnchorSet:
    template: PointCloud
    deformed: PointCloud
    offsets: np.ndarray
    center: np.ndarray

    def __len__(self):
        return len(self.template)


def _check_deform_net(net: DenseNet, feat_dim: int):
    if net.in_dim != 3 + feat_dim:
        raise NetError(f"deform net expects {net.in_dim} inputs, got 3 + {feat_dim}")
    if net.out_dim != 3 or net.activations[-1] != "tanh":
        raise NetError("deform net must end in a 3-wide tanh layer")


def anchor_grid(centers: np.ndarray) -> np.ndarray:
    """Per-candidate power-of-two step on which template, offsets and center
    are snapped so their sum (and its inverse) is exact in float64."""
    m = np.abs(centers).max(axis=1) + 2.0
    return np.exp2(np.ceil(np.log2(m)) - 52.0)


def snap(x: np.ndarray, step) -> np.ndarray:
    return np.round(x / step) * step


def deform_forward(template: np.ndarray, f_vote: np.ndarray, centers: np.ndarray, net: DenseNet):
    """Batched deformation for ``n`` candidates; anchors have shape (n, A, 3).

    Offsets are kept strictly inside (-1, 1) even where tanh saturates, and
    the snapping makes ``anchors - offsets - centers`` reproduce the snapped
    template bit for bit. The snap moves values by at most one ulp of the
    scene coordinates, so gradients pass straight through it.
    """
    n, a = len(f_vote), len(template)
    inp = np.concatenate([np.broadcast_to(template, (n, a, 3)),
                          np.broadcast_to(f_vote[:, None, :], (n, a, f_vote.shape[1]))], axis=2)
    raw, cache = net.run(inp.reshape(n * a, -1))
    step = anchor_grid(centers)[:, None, None]
    off = np.clip(snap(raw.reshape(n, a, 3), step), step - 1.0, 1.0 - step)
    anchors = snap(template[None], step) + off + snap(centers[:, None, :], step)
    return anchors, off, cache


def deform_backward(net: DenseNet, cache, g_anchors: np.ndarray):
    """Returns ``(tape, grad f_vote, grad centers)``."""
    n, a, _ = g_anchors.shape
    tape, g_in = net.backward(g_anchors.reshape(n * a, 3), cache)
    g_fvote = g_in.reshape(n, a, -1)[:, :, 3:].sum(axis=1)
    return tape, g_fvote, g_anchors.sum(axis=1)


def deform_anchors(template: PointCloud, f_vote, c_i, deform_net: DenseNet) -> AnchorSet:
    """The returned template and center are the grid-snapped values used in
    the sum (within one ulp of the inputs)."""
    f_vote = np.asarray(f_vote, dtype=np.float64).reshape(-1)
    c_i = np.asarray(c_i, dtype=np.float64).reshape(3)
    _check_deform_net(deform_net, len(f_vote))
    anchors, off, _ = deform_forward(template.points, f_vote[None], c_i[None], deform_net)
    step = anchor_grid(c_i[None])[0]
    return AnchorSet(PointCloud(snap(template.points, step)), PointCloud(anchors[0]), off[0], snap(c_i, step))


def anchor_loss(anchors: AnchorSet, gt_surface: PointCloud) -> float:
    return chamfer_distance(anchors.deformed.points, gt_surface.points)


def anchor_loss_grad(anchors: np.ndarray, gt_surface: np.ndarray):
    """Chamfer value and gradient w.r.t. the deformed anchor positions."""
    return chamfer_with_grad(anchors, gt_surface)


# -- feature grouping ---------------------------------------------------------

def group_forward(seed_pos, seed_feat, anchors: np.ndarray, fuse_net: DenseNet):
    """Mean over anchors of ``fuse_net(3-NN interpolated seed feature)``; batched over candidates."""
    n, a, _ = anchors.shape
    pts = anchors.reshape(n * a, 3)
    idx, w, d2, exact = interpolation_weights(seed_pos, pts, 3)
    interp = np.einsum("ik,ikc->ic", w, seed_feat[idx])
    out, cache = fuse_net.run(interp)
    f_anchor = out.reshape(n, a, -1).mean(axis=1)
    return f_anchor, (cache, idx, w, d2, exact, pts, (n, a))


def group_backward(fuse_net: DenseNet, seed_pos, seed_feat, saved, g_fanchor):
    """Returns ``(tape, grad seed features, grad anchor positions (n, A, 3))``."""
    cache, idx, w, d2, exact, pts, (n, a) = saved
    g_out = np.repeat(g_fanchor[:, None, :] / a, a, axis=1).reshape(n * a, -1)
    tape, g_interp = fuse_net.backward(g_out, cache)
    g_feat = np.zeros_like(seed_feat)
    np.add.at(g_feat, idx.reshape(-1), (w[:, :, None] * g_interp[:, None, :]).reshape(-1, seed_feat.shape[1]))
    # weights w_k = u_k / sum(u), u_k = 1 / d_k^2
    g_w = np.einsum("ic,ikc->ik", g_interp, seed_feat[idx])
    u = 1.0 / np.maximum(d2, 1e-300)
    total = u.sum(axis=1, keepdims=True)
    du = -2.0 * (u * u)[:, :, None] * (pts[:, None, :] - seed_pos[idx])
    g_bar = (w * g_w).sum(axis=1, keepdims=True)
    g_pts = np.einsum("ik,ikc->ic", (g_w - g_bar) / total, du)
    g_pts[exact] = 0.0
    return tape, g_feat, g_pts.reshape(n, a, 3)


def group_anchor_features(seeds: SeedSet, anchors: AnchorSet, fuse_net: DenseNet) -> np.ndarray:
    f, _ = group_forward(seeds.positions.points, seeds.features, anchors.deformed.points[None], fuse_net)
    return f[0]


# -- instance point sampling --------------------------------------------------

@dataclass
class SampledPrior:
    prior: PointCloud
    indices: np.ndarray
    augmented: PointCloud
    radius: float
    degenerate: bool


def anchor_radius(anchor_pts: np.ndarray, floor: float = 0.02):
    """Minimum pairwise anchor distance, floored; second value flags the floor."""
    if len(anchor_pts) < 2:
        return floor, True
    d, _ = cKDTree(anchor_pts).query(anchor_pts, k=2)
    r = float(d[:, 1].min())
    return (floor, True) if r < floor else (r, False)


def sample_instance_points(scan: PointCloud, anchors, iterations: int = 2, radius_floor: float = 0.02,
                           tree: cKDTree | None = None) -> SampledPrior:
    """Grow a point set outward from the anchors through the scan.

    ``anchors`` may be an AnchorSet or an (A, 3) array. Each pass selects scan
    points within the radius of the current working set, which then absorbs
    them. Only scan points are returned as the prior.
    """
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    apts = anchors.deformed.points if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    r, degenerate = anchor_radius(apts, radius_floor)
    tree = tree if tree is not None else cKDTree(scan.points)
    selected = np.zeros(len(scan), dtype=bool)
    frontier = apts
    for _ in range(iterations):
        if len(frontier) == 0:
            break
        hits = tree.query_ball_point(frontier, r)
        found = np.unique(np.concatenate([np.asarray(h, dtype=np.int64) for h in hits]))
        new = found[~selected[found]]
        selected[new] = True
        frontier = scan.points[new]
    idx = np.flatnonzero(selected)
    prior = PointCloud(scan.points[idx])
    augmented = PointCloud(np.concatenate([prior.points, apts], axis=0))
    return SampledPrior(prior, idx, augmented, r, degenerate)
