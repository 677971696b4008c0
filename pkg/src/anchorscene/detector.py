"""The dual-branch instance detector: parameters, per-scene forward pass,
backward pass through every sub-network, and inference-time decoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ancgroup, backbone, heads, proposal
from .config import Config
from .geometry import OrientedBox3, chamfer_with_grad, sample_mesh_surface, sphere_template
from .nnet import DenseNet, GradTape, adam_step

BRANCHES = ("obj", "wall")
WALL_SEED_DIST = 0.1
WALL_PATCH_HALF = 1.0


def branch_block_names(b: str, cfg: Config):
    names = [f"{b}_sa1", f"{b}_sa2", f"{b}_vote", f"{b}_pool", f"{b}_dec_vote"]
    if cfg.use_anchor:
        names += [f"{b}_deform", f"{b}_fuse", f"{b}_dec_anchor", f"{b}_fusion"]
    return names


def build_blocks(cfg: Config) -> dict:
    """Freshly initialized parameter blocks, seeded from ``cfg.seed``."""
    d, act = cfg.feature_dim, cfg.hidden_activation
    out_sizes = {"obj": heads.object_group_sizes(cfg.heading_bins, cfg.num_classes),
                 "wall": heads.WALL_GROUP_SIZES}
    blocks = {}
    base = cfg.seed * 1000
    for bi, b in enumerate(BRANCHES):
        s = base + 100 * bi
        blocks[f"{b}_sa1"], blocks[f"{b}_sa2"] = backbone.make_backbone_nets(cfg, s)
        blocks[f"{b}_vote"] = DenseNet([d, d, d, 3 + d], [act, act, "none"], seed=s + 2)
        blocks[f"{b}_pool"] = DenseNet([3 + d, d, d], act, seed=s + 3)
        p = sum(out_sizes[b])
        blocks[f"{b}_dec_vote"] = DenseNet([d, d, d, p], [act, act, "none"], seed=s + 4)
        if cfg.use_anchor:
            blocks[f"{b}_deform"] = DenseNet([3 + d, d, d // 2, 3], [act, act, "tanh"], seed=s + 5)
            blocks[f"{b}_fuse"] = DenseNet([d, d], act, seed=s + 6)
            blocks[f"{b}_dec_anchor"] = DenseNet([d, d, d, p], [act, act, "none"], seed=s + 7)
            groups = heads.OBJ_GROUPS if b == "obj" else heads.WALL_GROUPS
            blocks[f"{b}_fusion"] = heads.FusionWeights(groups, cfg.fusion_init)
    if cfg.use_anchor and cfg.use_wall_attention:
        for name, net in zip(("q", "k", "v"), heads.make_attention_nets(d, base + 300)):
            blocks[f"wall_attn_{name}"] = net
    return blocks


def restore_fusion(blocks: dict) -> dict:
    """Re-wrap fusion blocks loaded from a checkpoint as FusionWeights."""
    for b, groups in (("obj", heads.OBJ_GROUPS), ("wall", heads.WALL_GROUPS)):
        key = f"{b}_fusion"
        if key in blocks and not isinstance(blocks[key], heads.FusionWeights):
            blocks[key] = heads.FusionWeights.from_block(blocks[key], groups)
    return blocks


# ---------------------------------------------------------------------------
# Per-scene training data
# ---------------------------------------------------------------------------

@dataclass
class SceneData:
    points: np.ndarray
    groups: backbone.BackboneGroups
    obj_targets: heads.ObjectTargets | None = None
    obj_surfaces: list = field(default_factory=list)
    walls: list = field(default_factory=list)
    wall_surfaces: list = field(default_factory=list)
    obj_seed_labels: np.ndarray | None = None
    wall_seed_labels: np.ndarray | None = None
    wall_seed_targets: np.ndarray | None = None
    boxes: list = field(default_factory=list)
    class_ids: list = field(default_factory=list)
    meshes: list = field(default_factory=list)


def wall_seed_assignment(seed_pos, walls):
    """Wall index per seed (-1 if none within reach) and the seed's foot point
    on that wall's mid-height line."""
    labels = np.full(len(seed_pos), -1, dtype=np.int64)
    targets = np.zeros((len(seed_pos), 3))
    if not walls:
        return labels, targets
    foot, dist = heads.wall_line_points(walls, seed_pos)
    j = np.argmin(dist, axis=1)
    rows = np.arange(len(seed_pos))
    near = dist[rows, j] < WALL_SEED_DIST
    labels[near] = j[near]
    targets[:] = foot[rows, j]
    return labels, targets


def prepare_scene(points: np.ndarray, cfg: Config, scene=None, sample_seed: int = 0) -> SceneData:
    groups = backbone.prepare_groups(points, cfg)
    data = SceneData(points, groups)
    if scene is None:
        return data
    boxes = [o.box for o in scene.objects]
    data.boxes = boxes
    data.class_ids = [o.class_id for o in scene.objects]
    data.meshes = [o.mesh for o in scene.objects]
    data.obj_targets = heads.ObjectTargets.from_boxes(boxes, data.class_ids, cfg.heading_bins)
    data.obj_surfaces = [sample_mesh_surface(m, cfg.anchor_gt_samples, [sample_seed, i]).points
                         for i, m in enumerate(data.meshes)]
    data.walls = list(scene.walls)
    data.wall_surfaces = [sample_mesh_surface(w.mesh(), cfg.anchor_gt_samples, [sample_seed, 1000 + k]).points
                          for k, w in enumerate(data.walls)]
    data.obj_seed_labels = proposal.seed_instance_labels(groups.points2, boxes)
    data.wall_seed_labels, data.wall_seed_targets = wall_seed_assignment(groups.points2, data.walls)
    return data


def wall_patch(surface: np.ndarray, wall, foot: np.ndarray) -> np.ndarray:
    """Samples of the wall within reach of a candidate standing at ``foot``."""
    d = wall.direction()
    along = (surface[:, :2] - foot[:2]) @ d
    sel = surface[np.abs(along) <= WALL_PATCH_HALF]
    return sel if len(sel) else surface


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

class Detector:
    def __init__(self, cfg: Config, blocks: dict | None = None):
        self.cfg = cfg
        self.blocks = restore_fusion(blocks) if blocks is not None else build_blocks(cfg)
        self.template = sphere_template(cfg.num_anchors).points
        self.gidx = {"obj": heads.group_index(heads.object_group_sizes(cfg.heading_bins, cfg.num_classes)),
                     "wall": heads.group_index(heads.WALL_GROUP_SIZES)}

    def uses_attention(self) -> bool:
        return "wall_attn_q" in self.blocks

    def attn_nets(self):
        return tuple(self.blocks[f"wall_attn_{n}"] for n in ("q", "k", "v"))

    def branch_forward(self, b: str, data: SceneData, vote_only: bool = False):
        cfg, B = self.cfg, self.blocks
        out = {}
        f2, out["c_bb"] = backbone.encode_branch(data.points, data.groups, B[f"{b}_sa1"], B[f"{b}_sa2"])
        seeds = data.groups.points2
        vpos, vfeat, out["c_vote"] = proposal.vote_forward(seeds, f2, B[f"{b}_vote"])
        n_cand = cfg.obj_candidates if b == "obj" else cfg.wall_candidates
        cl = proposal.make_clusters(vpos, n_cand, cfg.cluster_radius, cfg.cluster_nsample)
        centers, fvote, out["c_cl"] = proposal.cluster_forward(vpos, vfeat, cl, B[f"{b}_pool"])
        theta_v, out["c_dv"] = B[f"{b}_dec_vote"].run(fvote)
        out.update(f2=f2, vpos=vpos, vfeat=vfeat, cl=cl, centers=centers, fvote=fvote, theta_v=theta_v)
        if f"{b}_deform" not in B:
            out["theta"] = theta_v
            return out
        anchors, off, out["c_def"] = ancgroup.deform_forward(self.template, fvote, centers, B[f"{b}_deform"])
        fanc, out["c_grp"] = ancgroup.group_forward(seeds, f2, anchors, B[f"{b}_fuse"])
        feat = fanc
        if b == "wall" and self.uses_attention():
            feat, out["c_att"] = heads.attention_forward(fanc, self.attn_nets())
        theta_a, out["c_da"] = B[f"{b}_dec_anchor"].run(feat)
        fw = B[f"{b}_fusion"]
        if vote_only:
            theta = heads.fuse_forward(theta_v, theta_v, fw.w1, fw.w2, self.gidx[b])
        else:
            theta = heads.fuse_forward(theta_v, theta_a, fw.w1, fw.w2, self.gidx[b])
        out.update(anchors=anchors, offsets=off, fanc=fanc, feat=feat, theta_a=theta_a, theta=theta)
        return out

    def branch_backward(self, b: str, data: SceneData, out, g_theta, g_centers, g_anchors, g_vpos) -> dict:
        B = self.blocks
        tapes = {}
        g_fvote = np.zeros_like(out["fvote"])
        g_f2 = np.zeros_like(out["f2"])
        if f"{b}_deform" in B:
            fw = B[f"{b}_fusion"]
            g_tv, g_ta, gw1, gw2 = heads.fuse_backward(out["theta_v"], out["theta_a"], fw.w1, fw.w2,
                                                     self.gidx[b], g_theta)
            tapes[f"{b}_fusion"] = GradTape([gw1, gw2])
            tapes[f"{b}_dec_anchor"], g_feat = B[f"{b}_dec_anchor"].backward(g_ta, out["c_da"])
            if "c_att" in out:
                att_tapes, g_feat = heads.attention_backward(self.attn_nets(), out["c_att"], g_feat)
                for n, t in zip(("q", "k", "v"), att_tapes):
                    tapes[f"wall_attn_{n}"] = t
            tapes[f"{b}_fuse"], g_f2_a, g_anc = ancgroup.group_backward(
                B[f"{b}_fuse"], data.groups.points2, out["f2"], out["c_grp"], g_feat)
            g_f2 += g_f2_a
            tapes[f"{b}_deform"], g_fv_d, g_c_d = ancgroup.deform_backward(
                B[f"{b}_deform"], out["c_def"], g_anc + g_anchors)
            g_fvote += g_fv_d
            g_centers = g_centers + g_c_d
        else:
            g_tv = g_theta
        tapes[f"{b}_dec_vote"], g_fv = B[f"{b}_dec_vote"].backward(g_tv, out["c_dv"])
        g_fvote += g_fv
        tapes[f"{b}_pool"], g_vp, g_vf = proposal.cluster_backward(
            B[f"{b}_pool"], out["cl"], out["c_cl"], g_centers, g_fvote, len(out["vpos"]), out["vfeat"].shape[1])
        tapes[f"{b}_vote"], g_f2_v = proposal.vote_backward(B[f"{b}_vote"], out["c_vote"], g_vp + g_vpos, g_vf)
        g_f2 += g_f2_v
        tapes[f"{b}_sa1"], tapes[f"{b}_sa2"] = backbone.encode_branch_backward(
            B[f"{b}_sa1"], B[f"{b}_sa2"], out["c_bb"], g_f2)
        return tapes

    def loss_and_grads(self, data: SceneData, need_grads: bool = True):
        """Total loss, breakdown and (if asked) one GradTape per block."""
        cfg = self.cfg
        terms, tapes, no_pos = {}, {}, False
        for b in BRANCHES:
            out = self.branch_forward(b, data)
            theta, centers = out["theta"], out["centers"]
            if b == "obj":
                vloss, g_vpos, _ = proposal.vote_loss_grad(out["vpos"], data.obj_seed_labels,
                                                           data.obj_targets.centers)
                terms["vote"] = vloss
                labels = heads.assign_targets(centers, data.obj_targets.centers, cfg.pos_dist, cfg.neg_dist)
                t, g_theta, g_cent = heads.object_head_loss(theta, centers, labels, data.obj_targets,
                                                            cfg.heading_bins, cfg.num_classes)
                surfaces = [data.obj_surfaces[j] if j >= 0 else None for j in labels]
            else:
                vloss, g_vpos, _ = proposal.per_seed_vote_loss(out["vpos"], data.wall_seed_labels >= 0,
                                                               data.wall_seed_targets)
                terms["wall_vote"] = vloss
                labels, feet = heads.assign_wall_targets(centers, data.walls, cfg.wall_pos_dist,
                                                         cfg.wall_neg_dist)
                t, g_theta, g_cent = heads.wall_head_loss(theta, centers, labels, feet, data.walls)
                surfaces = [wall_patch(data.wall_surfaces[j], data.walls[j], feet[i]) if j >= 0 else None
                            for i, j in enumerate(labels)]
            terms.update(t)
            g_anchors = np.zeros((len(centers), len(self.template), 3))
            if "anchors" in out:
                pos = np.flatnonzero(labels >= 0)
                total = 0.0
                for i in pos:
                    v, g = chamfer_with_grad(out["anchors"][i], surfaces[i])
                    total += v
                    g_anchors[i] = g / len(pos)
                terms[f"{b}_anchor"] = total / len(pos) if len(pos) else 0.0
                no_pos |= len(pos) == 0
            else:
                terms[f"{b}_anchor"] = 0.0
            if need_grads:
                tapes.update(self.branch_backward(b, data, out, g_theta, g_cent, g_anchors, g_vpos))
        breakdown = {k: float(terms[k]) for k in heads.OBJ_TERMS + heads.WALL_TERMS + heads.ANCHOR_TERMS}
        total = sum(breakdown.values())
        return total, breakdown, tapes, no_pos

    # -- inference ----------------------------------------------------------

    def detect(self, points: np.ndarray, vote_only: bool = False, threshold: float | None = None):
        cfg = self.cfg
        data = prepare_scene(points, cfg)
        thr = cfg.objectness_threshold if threshold is None else threshold
        out = self.branch_forward("obj", data, vote_only)
        objects = []
        for i in range(len(out["centers"])):
            bp = heads.BoxParams.from_vector(out["theta"][i], cfg.heading_bins, cfg.num_classes)
            objects.append(Detection(bp.box(out["centers"][i]), bp.score(), bp.class_id(), out["centers"][i],
                                     out["fvote"][i], out["fanc"][i] if "fanc" in out else None,
                                     out["anchors"][i] if "anchors" in out else None))
        cand = [d for d in objects if d.score > thr]
        keep = heads.nms_3d([d.box for d in cand], [d.score for d in cand], cfg.nms_iou)
        objects = [cand[i] for i in keep]
        wout = self.branch_forward("wall", data, vote_only)
        walls = []
        for i in range(len(wout["centers"])):
            quad, score = heads.decode_wall(wout["theta"][i], wout["centers"][i])
            walls.append((quad, score))
        return objects, walls, data


@dataclass
class Detection:
    box: OrientedBox3
    score: float
    class_id: int
    center: np.ndarray
    f_vote: np.ndarray
    f_anchor: np.ndarray | None
    anchors: np.ndarray | None


def apply_tapes(blocks: dict, tapes: dict, lr: float, cfg: Config):
    for name in sorted(blocks):
        tape = tapes.get(name)
        if tape is None:
            tape = GradTape.zeros_for(blocks[name])
        adam_step(blocks[name], tape, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
