"""Box and wall decoding, learnable fusion of the two decoder outputs, target
assignment, the detection loss, wall self-attention and 3D NMS.

Decoder outputs are split into parameter groups. Fusion mixes the raw outputs
of the vote-feature decoder and the anchor-feature decoder with one pair of
weights per group; decoding (softplus sizes, tanh residuals) happens after.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import OrientedBox3, WallQuad, normalize_angle, oriented_iou
from .nnet import DenseNet, NetError, ParamBlock

OBJ_GROUPS = ("center", "size", "heading_bin", "heading_res", "class", "objectness")
WALL_GROUPS = ("center", "yaw", "size", "objectness")


def object_group_sizes(heading_bins: int = 12, num_classes: int = 6):
    return (3, 3, heading_bins, heading_bins, num_classes, 2)


WALL_GROUP_SIZES = (3, 2, 2, 2)


def group_slices(sizes):
    out, start = [], 0
    for s in sizes:
        out.append(slice(start, start + s))
        start += s
    return out


def group_index(sizes) -> np.ndarray:
    """Group id per output column."""
    return np.repeat(np.arange(len(sizes)), sizes)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


# -- decoding -----------------------------------------------------------------

def bin_center(k: int, heading_bins: int = 12) -> float:
    return 2.0 * math.pi * k / heading_bins - math.pi


def heading_target(yaw: float, heading_bins: int = 12):
    """Nearest bin and the residual from its center, in [-pi/NH, pi/NH]."""
    width = 2.0 * math.pi / heading_bins
    k = int(np.floor((normalize_angle(yaw) + math.pi) / width + 0.5)) % heading_bins
    return k, normalize_angle(yaw - bin_center(k, heading_bins))


@dataclass
class BoxParams:
    center_offset: np.ndarray
    size: np.ndarray
    heading_logits: np.ndarray
    heading_residuals: np.ndarray
    class_logits: np.ndarray
    objectness: np.ndarray

    @classmethod
    def from_vector(cls, theta, heading_bins: int = 12, num_classes: int = 6) -> "BoxParams":
        theta = np.asarray(theta, dtype=np.float64)
        sizes = object_group_sizes(heading_bins, num_classes)
        if theta.shape[-1] != sum(sizes):
            raise NetError(f"box vector width {theta.shape[-1]} != {sum(sizes)}")
        c, s, hb, hr, cl, ob = (theta[..., sl] for sl in group_slices(sizes))
        return cls(c.copy(), softplus(s), hb.copy(), (math.pi / heading_bins) * np.tanh(hr), cl.copy(), ob.copy())

    @property
    def heading_bins(self) -> int:
        return self.heading_logits.shape[-1]

    def yaw(self) -> float:
        k = int(np.argmax(self.heading_logits))
        return normalize_angle(bin_center(k, self.heading_bins) + float(self.heading_residuals[k]))

    def score(self) -> float:
        return float(softmax(self.objectness)[1])

    def class_id(self) -> int:
        return int(np.argmax(self.class_logits))

    def box(self, cluster_center) -> OrientedBox3:
        return OrientedBox3(np.asarray(cluster_center) + self.center_offset, self.size, self.yaw())


def decode_box(f, decoder: DenseNet, heading_bins: int = 12, num_classes: int = 6) -> BoxParams:
    want = sum(object_group_sizes(heading_bins, num_classes))
    if decoder.out_dim != want:
        raise NetError(f"decoder must output {want} values, got {decoder.out_dim}")
    return BoxParams.from_vector(decoder.run(np.asarray(f, dtype=np.float64))[0], heading_bins, num_classes)


def decode_wall(theta, cluster_center):
    """Wall quad and objectness score from a fused wall vector."""
    c, y, s, ob = (theta[sl] for sl in group_slices(WALL_GROUP_SIZES))
    yaw = 0.5 * math.atan2(y[1], y[0])
    wh = softplus(s)
    return WallQuad(np.asarray(cluster_center) + c, yaw, float(wh[0]), float(wh[1])), float(softmax(ob)[1])


# -- fusion -------------------------------------------------------------------

class FusionWeights(ParamBlock):
    """Per-group weights ``w1`` (vote decoder) and ``w2`` (anchor decoder)."""

    def __init__(self, groups, init: float = 0.5, w1=None, w2=None):
        n = len(groups)
        super().__init__({"w1": np.full(n, init) if w1 is None else w1,
                          "w2": np.full(n, init) if w2 is None else w2})
        self.groups = tuple(groups)

    @classmethod
    def from_block(cls, block: ParamBlock, groups) -> "FusionWeights":
        fw = cls(groups, w1=block["w1"].copy(), w2=block["w2"].copy())
        fw.m, fw.v, fw.t = block.m, block.v, block.t
        return fw

    @property
    def w1(self):
        return self["w1"]

    @property
    def w2(self):
        return self["w2"]

    def as_dict(self) -> dict:
        return {g: {"w1": float(a), "w2": float(b)} for g, a, b in zip(self.groups, self.w1, self.w2)}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=1)


def fuse_forward(theta_v, theta_a, w1, w2, gidx):
    return w1[gidx] * theta_v + w2[gidx] * theta_a


def fuse_backward(theta_v, theta_a, w1, w2, gidx, g):
    """Returns ``(grad theta_v, grad theta_a, grad w1, grad w2)``."""
    n_groups = len(w1)
    gw1 = np.bincount(gidx, weights=(g * theta_v).reshape(-1, len(gidx)).sum(0), minlength=n_groups)
    gw2 = np.bincount(gidx, weights=(g * theta_a).reshape(-1, len(gidx)).sum(0), minlength=n_groups)
    return w1[gidx] * g, w2[gidx] * g, gw1, gw2


def fuse_predictions(theta_vote, theta_anchor, w: FusionWeights, sizes=None):
    theta_vote = np.asarray(theta_vote, dtype=np.float64)
    theta_anchor = np.asarray(theta_anchor, dtype=np.float64)
    if theta_vote.shape != theta_anchor.shape:
        raise NetError("fused vectors must have the same shape")
    if sizes is None:
        sizes = object_group_sizes() if len(w.groups) == len(OBJ_GROUPS) else WALL_GROUP_SIZES
    return fuse_forward(theta_vote, theta_anchor, w.w1, w.w2, group_index(sizes))


# -- targets ------------------------------------------------------------------

POSITIVE_IGNORE = -2
NEGATIVE = -1


def assign_targets(centers, gt_centers, pos_dist: float = 0.3, neg_dist: float = 0.6) -> np.ndarray:
    """Per candidate: index of the nearest GT if within ``pos_dist``, -1 if
    farther than ``neg_dist`` from every GT, otherwise -2 (ignored)."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 3)
    out = np.full(len(centers), NEGATIVE, dtype=np.int64)
    if len(gt) == 0:
        return out
    d = np.linalg.norm(centers[:, None, :] - gt[None, :, :], axis=2)
    nearest = np.argmin(d, axis=1)
    dmin = d[np.arange(len(centers)), nearest]
    out[dmin < pos_dist] = nearest[dmin < pos_dist]
    out[(dmin >= pos_dist) & (dmin <= neg_dist)] = POSITIVE_IGNORE
    return out


def wall_line_points(walls, pts):
    """Closest point on each wall's mid-height segment, and its BEV distance.

    Returns ``(foot (n, W, 3), dist (n, W))``.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    foot = np.zeros((len(pts), len(walls), 3))
    dist = np.zeros((len(pts), len(walls)))
    for j, w in enumerate(walls):
        a, b = w.endpoints_bev()
        ab = b - a
        t = np.clip((pts[:, :2] - a) @ ab / (ab @ ab), 0.0, 1.0)
        q = a + t[:, None] * ab
        foot[:, j, :2] = q
        foot[:, j, 2] = w.center[2]
        dist[:, j] = np.linalg.norm(pts[:, :2] - q, axis=1)
    return foot, dist


def assign_wall_targets(centers, walls, pos_dist: float = 0.5, neg_dist: float = 1.0):
    """Like :func:`assign_targets` but measured to the wall segment in the floor plane.

    Returns ``(labels, foot points (n, 3))``.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    out = np.full(len(centers), NEGATIVE, dtype=np.int64)
    feet = np.zeros((len(centers), 3))
    if len(walls) == 0:
        return out, feet
    foot, d = wall_line_points(walls, centers)
    nearest = np.argmin(d, axis=1)
    dmin = d[np.arange(len(centers)), nearest]
    out[dmin < pos_dist] = nearest[dmin < pos_dist]
    out[(dmin >= pos_dist) & (dmin <= neg_dist)] = POSITIVE_IGNORE
    feet = foot[np.arange(len(centers)), nearest]
    return out, feet


# -- losses -------------------------------------------------------------------

def cross_entropy(logits, target):
    """Mean CE over rows and its gradient w.r.t. the logits."""
    n = len(target)
    if n == 0:
        return 0.0, np.zeros_like(logits)
    lp = log_softmax(logits)
    loss = -lp[np.arange(n), target].mean()
    g = np.exp(lp)
    g[np.arange(n), target] -= 1.0
    return float(loss), g / n


def l1(pred, target):
    """Per-row summed L1, averaged over rows; gradient w.r.t. ``pred``."""
    n = len(pred)
    if n == 0:
        return 0.0, np.zeros_like(pred)
    d = pred - target
    return float(np.abs(d).sum() / n), np.sign(d) / n


@dataclass
class ObjectTargets:
    centers: np.ndarray   # (G, 3)
    sizes: np.ndarray     # (G, 3)
    bins: np.ndarray      # (G,)
    residuals: np.ndarray  # (G,)
    classes: np.ndarray   # (G,)

    @classmethod
    def from_boxes(cls, boxes, class_ids, heading_bins: int = 12) -> "ObjectTargets":
        hv = [heading_target(b.yaw, heading_bins) for b in boxes]
        return cls(np.array([b.center for b in boxes]).reshape(-1, 3),
                   np.array([b.size for b in boxes]).reshape(-1, 3),
                   np.array([h[0] for h in hv], dtype=np.int64),
                   np.array([h[1] for h in hv], dtype=np.float64),
                   np.asarray(class_ids, dtype=np.int64))


def object_head_loss(theta, centers, labels, tg: ObjectTargets, heading_bins: int = 12,
                     num_classes: int = 6):
    """Objectness, center, size, heading and class terms for fused object vectors.

    Returns ``(terms, grad theta, grad centers)``.
    """
    sl = group_slices(object_group_sizes(heading_bins, num_classes))
    g_theta = np.zeros_like(theta)
    g_cent = np.zeros_like(centers)
    terms = {}
    counted = labels != POSITIVE_IGNORE
    obj_label = (labels[counted] >= 0).astype(np.int64)
    terms["objectness"], g = cross_entropy(theta[counted][:, sl[5]], obj_label)
    g_theta[np.flatnonzero(counted)[:, None], np.arange(sl[5].start, sl[5].stop)] += g

    pos = np.flatnonzero(labels >= 0)
    gt = labels[pos]
    tp = theta[pos]
    terms["center"], g = l1(centers[pos] + tp[:, sl[0]], tg.centers[gt])
    g_theta[pos, sl[0]] += g
    g_cent[pos] += g

    raw = tp[:, sl[1]]
    terms["size"], g = l1(softplus(raw), tg.sizes[gt])
    g_theta[pos, sl[1]] += g * sigmoid(raw)

    terms["heading_bin"], g = cross_entropy(tp[:, sl[2]], tg.bins[gt])
    g_theta[pos, sl[2]] += g

    scale = math.pi / heading_bins
    col = sl[3].start + tg.bins[gt]
    t = np.tanh(theta[pos, col])
    terms["heading_res"], g = l1((scale * t)[:, None], tg.residuals[gt][:, None])
    g_theta[pos, col] += g[:, 0] * scale * (1.0 - t * t)

    terms["class"], g = cross_entropy(tp[:, sl[4]], tg.classes[gt])
    g_theta[pos, sl[4]] += g
    return terms, g_theta, g_cent


def wall_targets(walls):
    yaw2 = np.array([[math.cos(2 * w.yaw), math.sin(2 * w.yaw)] for w in walls]).reshape(-1, 2)
    size = np.array([[w.width, w.height] for w in walls]).reshape(-1, 2)
    return yaw2, size


def wall_head_loss(theta, centers, labels, feet, walls):
    """Quad regression (center to the wall's mid-height line, doubled-angle yaw,
    width/height) plus objectness. Returns ``(terms, grad theta, grad centers)``."""
    sl = group_slices(WALL_GROUP_SIZES)
    g_theta = np.zeros_like(theta)
    g_cent = np.zeros_like(centers)
    counted = labels != POSITIVE_IGNORE
    obj_label = (labels[counted] >= 0).astype(np.int64)
    terms = {}
    terms["wall_objectness"], g = cross_entropy(theta[counted][:, sl[3]], obj_label)
    g_theta[np.flatnonzero(counted)[:, None], np.arange(sl[3].start, sl[3].stop)] += g

    pos = np.flatnonzero(labels >= 0)
    yaw2, size = wall_targets(walls)
    tp = theta[pos]
    gt = labels[pos]
    raw = tp[:, sl[2]]
    pred = np.concatenate([centers[pos] + tp[:, sl[0]], tp[:, sl[1]], softplus(raw)], axis=1)
    target = np.concatenate([feet[pos], yaw2[gt] if len(pos) else np.zeros((0, 2)),
                             size[gt] if len(pos) else np.zeros((0, 2))], axis=1)
    terms["wall_quad"], g = l1(pred, target)
    g_theta[pos, sl[0]] += g[:, :3]
    # the target foot point slides along the wall with the center
    g_cent[pos] += g[:, :3] - _along_wall(walls, gt, centers[pos], g[:, :3])
    g_theta[pos, sl[1]] += g[:, 3:5]
    g_theta[pos, sl[2]] += g[:, 5:7] * sigmoid(raw)
    return terms, g_theta, g_cent


def _along_wall(walls, idx, pts, g):
    """Component of ``g`` along each wall direction, where the foot point is interior."""
    out = np.zeros_like(g)
    for r, (j, p) in enumerate(zip(idx, pts)):
        a, b = walls[j].endpoints_bev()
        ab = b - a
        t = (p[:2] - a) @ ab / (ab @ ab)
        if 0.0 < t < 1.0:
            d = ab / np.linalg.norm(ab)
            out[r, :2] = (g[r, :2] @ d) * d
    return out


def mean_anchor_loss(anchors, labels, surfaces, chamfer_fn):
    """Mean Chamfer over positive candidates; returns ``(loss, grad anchors, no_positives)``."""
    g = np.zeros_like(anchors)
    pos = np.flatnonzero(labels >= 0)
    if len(pos) == 0:
        return 0.0, g, True
    total = 0.0
    for i in pos:
        v, gi = chamfer_fn(anchors[i], surfaces[labels[i]])
        total += v
        g[i] = gi / len(pos)
    return total / len(pos), g, False


OBJ_TERMS = ("vote", "objectness", "center", "size", "heading_bin", "heading_res", "class")
WALL_TERMS = ("wall_vote", "wall_quad", "wall_objectness")
ANCHOR_TERMS = ("obj_anchor", "wall_anchor")


def detection_loss(preds: dict, anchorsets: dict, targets: dict, gt: dict, heading_bins: int = 12,
                   num_classes: int = 6):
    """Total detection loss and its per-term breakdown.

    ``preds`` holds fused vectors and cluster centers (``obj_theta``,
    ``obj_centers``, ``wall_theta``, ``wall_centers``) and the vote losses
    already computed (``vote``, ``wall_vote``). ``anchorsets`` holds
    ``obj``/``wall`` anchor arrays (n, A, 3), ``targets`` the label arrays
    (``obj``, ``wall``, ``wall_feet``), and ``gt`` the ObjectTargets,
    walls and GT surface samples. Returns ``(total, breakdown, no_positives)``.
    """
    from .geometry import chamfer_with_grad

    terms = {"vote": preds.get("vote", 0.0), "wall_vote": preds.get("wall_vote", 0.0)}
    t, _, _ = object_head_loss(preds["obj_theta"], preds["obj_centers"], targets["obj"], gt["objects"],
                               heading_bins, num_classes)
    terms.update(t)
    t, _, _ = wall_head_loss(preds["wall_theta"], preds["wall_centers"], targets["wall"],
                             targets["wall_feet"], gt["walls"])
    terms.update(t)
    flags = []
    for key, lab, surf in (("obj", targets["obj"], gt["obj_surfaces"]),
                           ("wall", targets["wall"], gt["wall_surfaces"])):
        if key in anchorsets:
            v, _, flag = mean_anchor_loss(anchorsets[key], lab, surf, chamfer_with_grad)
        else:
            v, flag = 0.0, False
        terms[f"{key}_anchor"] = v
        flags.append(flag)
    breakdown = {k: float(terms[k]) for k in OBJ_TERMS + WALL_TERMS + ANCHOR_TERMS}
    return sum(breakdown.values()), breakdown, any(flags)


# -- wall self-attention ------------------------------------------------------

def make_attention_nets(dim: int, seed: int):
    return tuple(DenseNet([dim, dim], "none", seed=seed + i) for i in range(3))


def attention_forward(x, nets):
    q_net, k_net, v_net = nets
    q, cq = q_net.run(x)
    k, ck = k_net.run(x)
    v, cv = v_net.run(x)
    scale = 1.0 / math.sqrt(x.shape[1])
    a = softmax(q @ k.T * scale)
    return x + a @ v, (cq, ck, cv, q, k, v, a, scale)


def attention_backward(nets, saved, g_out):
    """Returns ``(tapes (q, k, v), grad x)``."""
    cq, ck, cv, q, k, v, a, scale = saved
    g_a = g_out @ v.T
    g_v = a.T @ g_out
    g_s = a * (g_a - (g_a * a).sum(axis=1, keepdims=True)) * scale
    g_q = g_s @ k
    g_k = g_s.T @ q
    tq, gx_q = nets[0].backward(g_q, cq)
    tk, gx_k = nets[1].backward(g_k, ck)
    tv, gx_v = nets[2].backward(g_v, cv)
    return (tq, tk, tv), g_out + gx_q + gx_k + gx_v


def wall_self_attention(features, attn_nets):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise NetError("wall attention needs at least one proposal")
    return attention_forward(x, attn_nets)[0]


# -- duplicate suppression ----------------------------------------------------

def nms_3d(boxes, scores, iou_threshold: float = 0.25) -> list:
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores differ in count")
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(oriented_iou(boxes[i], boxes[j]) <= iou_threshold for j in kept):
            kept.append(i)
    return kept
