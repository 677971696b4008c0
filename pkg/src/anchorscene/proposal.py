"""Voting and vote clustering.

Every seed casts one vote: a position offset toward its instance center and
a feature residual. Candidates are farthest-point samples of the votes; each
gathers the votes within a radius, takes their mean position as the cluster
center and max-pools a small network over (relative position, feature).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import SeedSet
from .geometry import (
    PointCloud,
    ball_query_batch,
    farthest_point_sample,
    lexicographic_min_index,
)
from .nnet import DenseNet, NetError


@dataclass
class VoteSet:
    vote_positions: PointCloud
    vote_features: np.ndarray
    source_seed: np.ndarray

    def __len__(self):
        return len(self.vote_positions)


@dataclass
class Candidate:
    center: np.ndarray
    f_vote: np.ndarray
    member_votes: np.ndarray


# -- voting -------------------------------------------------------------------

def vote_forward(seed_pos, seed_feats, vote_net: DenseNet):
    out, cache = vote_net.run(seed_feats)
    return seed_pos + out[:, :3], seed_feats + out[:, 3:], cache


def vote_backward(vote_net: DenseNet, cache, g_pos, g_feat):
    """Gradient w.r.t. the seed features (positions are data)."""
    tape, g_in = vote_net.backward(np.concatenate([g_pos, g_feat], axis=1), cache)
    return tape, g_in + g_feat


def vote(seeds: SeedSet, vote_net: DenseNet) -> VoteSet:
    if len(seeds) == 0:
        raise NetError("no seeds to vote from")
    d = seeds.features.shape[1]
    if vote_net.out_dim != 3 + d:
        raise NetError(f"vote net must output {3 + d} values, got {vote_net.out_dim}")
    pos, feat, _ = vote_forward(seeds.positions.points, seeds.features, vote_net)
    return VoteSet(PointCloud(pos), feat, np.arange(len(seeds)))


# -- clustering ---------------------------------------------------------------

@dataclass
class Clusters:
    """Non-differentiable part of clustering: who belongs to whom."""

    seeds: np.ndarray    # (n,) vote index chosen by FPS
    members: np.ndarray  # (n, K) padded vote indices
    counts: np.ndarray   # (n,)
    radius: float

    def mean_weights(self) -> np.ndarray:
        k = self.members.shape[1]
        valid = np.arange(k)[None, :] < self.counts[:, None]
        return valid / self.counts[:, None]


def make_clusters(vote_pos, n_candidates: int, radius: float, nsample: int) -> Clusters:
    n = min(n_candidates, len(vote_pos))
    seeds = farthest_point_sample(vote_pos, n, lexicographic_min_index(vote_pos))
    members, counts = ball_query_batch(vote_pos, vote_pos[seeds], radius, nsample)
    return Clusters(seeds, members, counts, radius)


def cluster_forward(vote_pos, vote_feat, cl: Clusters, pool_net: DenseNet):
    """Returns ``(centers, f_vote, cache)``."""
    n, k = cl.members.shape
    wts = cl.mean_weights()
    centers = np.einsum("nk,nkc->nc", wts, vote_pos[cl.members])
    rel = (vote_pos[cl.members] - vote_pos[cl.seeds][:, None, :]) / cl.radius
    inp = np.concatenate([rel, vote_feat[cl.members]], axis=2).reshape(n * k, -1)
    out, cache = pool_net.run(inp)
    out = out.reshape(n, k, -1)
    arg = np.argmax(out, axis=1)
    f_vote = np.take_along_axis(out, arg[:, None, :], axis=1)[:, 0, :]
    return centers, f_vote, (cache, arg, wts)


def cluster_backward(pool_net: DenseNet, cl: Clusters, saved, g_centers, g_fvote, n_votes, feat_dim):
    """Returns ``(tape, grad vote positions, grad vote features)``."""
    cache, arg, wts = saved
    n, k = cl.members.shape
    g_out = np.zeros((n, k, g_fvote.shape[1]))
    np.put_along_axis(g_out, arg[:, None, :], g_fvote[:, None, :], axis=1)
    tape, g_in = pool_net.backward(g_out.reshape(n * k, -1), cache)
    g_in = g_in.reshape(n, k, -1)
    g_rel = g_in[:, :, :3] / cl.radius
    g_pos = np.zeros((n_votes, 3))
    g_feat = np.zeros((n_votes, feat_dim))
    np.add.at(g_pos, cl.members.reshape(-1), (g_rel + wts[:, :, None] * g_centers[:, None, :]).reshape(-1, 3))
    np.add.at(g_pos, cl.seeds, -g_rel.sum(axis=1))
    np.add.at(g_feat, cl.members.reshape(-1), g_in[:, :, 3:].reshape(-1, feat_dim))
    return tape, g_pos, g_feat


def cluster_votes(votes: VoteSet, n_candidates: int, radius: float, pool_net: DenseNet,
                  nsample: int = 16) -> list:
    pos = votes.vote_positions.points
    cl = make_clusters(pos, n_candidates, radius, nsample)
    centers, f_vote, _ = cluster_forward(pos, votes.vote_features, cl, pool_net)
    return [Candidate(centers[i], f_vote[i], cl.members[i, :cl.counts[i]].copy())
            for i in range(len(cl.seeds))]


# -- supervision --------------------------------------------------------------

def seed_instance_labels(seed_pos, boxes) -> np.ndarray:
    """Instance index per seed by point-in-box (lowest box index wins), -1 for background."""
    labels = np.full(len(seed_pos), -1, dtype=np.int64)
    for j in range(len(boxes) - 1, -1, -1):
        labels[boxes[j].contains(seed_pos)] = j
    return labels


def per_seed_vote_loss(vote_pos, fg, targets):
    """Mean per-seed L1 between foreground votes and per-seed targets.

    Returns ``(loss, grad, no_foreground)``.
    """
    grad = np.zeros_like(vote_pos)
    if not fg.any():
        return 0.0, grad, True
    diff = vote_pos[fg] - targets[fg]
    n = int(fg.sum())
    grad[fg] = np.sign(diff) / n
    return float(np.abs(diff).sum() / n), grad, False


def vote_loss_grad(vote_pos, labels, centers):
    """Vote regression toward instance centers; ``labels`` index ``centers``."""
    fg = labels >= 0
    targets = np.zeros_like(vote_pos)
    targets[fg] = centers[labels[fg]]
    return per_seed_vote_loss(vote_pos, fg, targets)


def vote_loss(votes: VoteSet, seeds: SeedSet, gt_instances):
    """L1 vote regression toward box centers; returns ``(loss, warning flag)``."""
    labels = seed_instance_labels(seeds.positions.points[votes.source_seed], gt_instances)
    centers = np.array([b.center for b in gt_instances]).reshape(-1, 3)
    loss, _, flag = vote_loss_grad(votes.vote_positions.points, labels, centers)
    return loss, flag
