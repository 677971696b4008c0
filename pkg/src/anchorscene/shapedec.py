"""Implicit shape decoding for detected instances.

Instance points are moved into the box frame (centered, yaw removed, each
axis divided by the box size so the box becomes the cube [-0.5, 0.5]^3),
encoded with proposal features into a max-pooled embedding, and an occupancy
network is queried on a grid. Marching cubes turns the field into a mesh
that is mapped back onto the box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import measure

from .geometry import OrientedBox3, PointCloud, TriMesh, rotate_z
from .nnet import DenseNet, NetError

CUBE_HALF = 0.5


@dataclass
class ShapeEmbedding:
    f_shape: np.ndarray
    from_anchors_only: bool = False

    def __post_init__(self):
        if not np.all(np.isfinite(self.f_shape)):
            raise NetError("non-finite shape embedding")


def canonicalize(pts, box: OrientedBox3) -> np.ndarray:
    loc = rotate_z(np.asarray(pts, dtype=np.float64).reshape(-1, 3) - np.array(box.center), -box.yaw)
    return loc / np.array(box.size)


def align_to_scene(mesh: TriMesh, box: OrientedBox3) -> TriMesh:
    if mesh.is_empty():
        return mesh
    v = rotate_z(mesh.vertices * np.array(box.size), box.yaw) + np.array(box.center)
    return TriMesh(v, mesh.triangles.copy())


def make_shape_nets(cfg, seed: int):
    d, h, e = cfg.feature_dim, cfg.shape_hidden, cfg.shape_dim
    act = cfg.hidden_activation
    enc = DenseNet([3 + 2 * d, h, e], act, seed=seed)
    dec = DenseNet([3 + e, h, h, 1], [act, act, "none"], seed=seed + 1)
    return enc, dec


def encoder_input(prior_canon: np.ndarray, f_vote, f_anchor) -> np.ndarray:
    n = len(prior_canon)
    feats = np.concatenate([np.asarray(f_vote).reshape(-1), np.asarray(f_anchor).reshape(-1)])
    return np.concatenate([prior_canon, np.broadcast_to(feats, (n, len(feats)))], axis=1)


def encode_forward(inp: np.ndarray, enc: DenseNet):
    out, cache = enc.run(inp)
    arg = np.argmax(out, axis=0)
    return out[arg, np.arange(out.shape[1])], (cache, arg, len(inp))


def encode_backward(enc: DenseNet, saved, g_shape):
    cache, arg, n = saved
    g = np.zeros((n, len(g_shape)))
    g[arg, np.arange(len(g_shape))] = g_shape
    tape, _ = enc.backward(g, cache)
    return tape


def encode_shape(prior: PointCloud, f_vote, f_anchor, enc_net: DenseNet, anchors=None) -> ShapeEmbedding:
    """``prior`` must already be canonicalized. An empty prior falls back to
    the (canonicalized) anchors and sets ``from_anchors_only``."""
    pts = prior.points
    fallback = False
    if len(pts) == 0:
        if anchors is None or len(anchors) == 0:
            raise NetError("empty prior and no anchors to fall back on")
        pts, fallback = np.asarray(anchors, dtype=np.float64), True
    f, _ = encode_forward(encoder_input(pts, f_vote, f_anchor), enc_net)
    return ShapeEmbedding(f, fallback)


def decoder_input(f_shape, queries) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    return np.concatenate([q, np.broadcast_to(f_shape, (len(q), len(f_shape)))], axis=1)


def occupancy_logits(f_shape, queries, dec_net: DenseNet, chunk: int = 8192) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(q))
    for s in range(0, len(q), chunk):
        out[s:s + chunk] = dec_net.run(decoder_input(f_shape, q[s:s + chunk]))[0][:, 0]
    return out


def decode_occupancy(emb: ShapeEmbedding, queries, dec_net: DenseNet):
    """Occupancy probability per query and a flag for queries outside the cube."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    logits = occupancy_logits(emb.f_shape, q, dec_net)
    outside = bool(np.any(np.abs(q) > CUBE_HALF))
    return 0.5 * (1.0 + np.tanh(0.5 * logits)), outside


def grid_points(resolution: int) -> np.ndarray:
    ax = np.linspace(-CUBE_HALF, CUBE_HALF, resolution)
    g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


def field_to_mesh(values: np.ndarray, iso: float = 0.5):
    """Marching cubes over a (R, R, R) field sampled on the canonical cube.

    Values are padded with an outside layer so the surface closes at the
    cube boundary. Returns ``(mesh, empty_flag)``.
    """
    r = values.shape[0]
    if min(values.shape) < 2:
        raise NetError("field too small")
    if values.max() <= iso or values.min() >= iso:
        return TriMesh(np.zeros((0, 3))), True
    pad = np.pad(values, 1, constant_values=min(values.min(), 0.0))
    step = 2 * CUBE_HALF / (r - 1)
    verts, faces, _, _ = measure.marching_cubes(pad, level=iso, spacing=(step,) * 3)
    verts = verts - CUBE_HALF - step
    # skimage orients faces toward decreasing values; flip to point outward
    mesh = TriMesh(verts, faces[:, ::-1].astype(np.int64))
    return mesh, mesh.is_empty()


def extract_mesh(emb: ShapeEmbedding, dec_net: DenseNet, resolution: int = 32, iso: float = 0.5):
    if resolution < 8:
        raise NetError("resolution must be at least 8")
    if not 0.0 < iso < 1.0:
        raise NetError("iso must be in (0, 1)")
    occ, _ = decode_occupancy(emb, grid_points(resolution), dec_net)
    return field_to_mesh(occ.reshape(resolution, resolution, resolution), iso)


# ---------------------------------------------------------------------------
# Training support
# ---------------------------------------------------------------------------

def bce_with_logits(logits, labels):
    """Mean binary cross-entropy and its gradient w.r.t. the logits."""
    loss = np.logaddexp(0.0, logits) - labels * logits
    prob = 0.5 * (1.0 + np.tanh(0.5 * logits))
    return float(loss.mean()), (prob - labels) / len(logits)


def shape_loss_and_grads(inp_points, queries, labels, enc: DenseNet, dec: DenseNet):
    """BCE of one shape sample; returns ``(loss, enc tape, dec tape)``."""
    f, ecache = encode_forward(inp_points, enc)
    logits, dcache = dec.run(decoder_input(f, queries))
    loss, g = bce_with_logits(logits[:, 0], labels)
    dtape, g_in = dec.backward(g[:, None], dcache)
    etape = encode_backward(enc, ecache, g_in[:, 3:].sum(axis=0))
    return loss, etape, dtape


def occupancy_samples(box: OrientedBox3, surface_pts: np.ndarray, inside_fn, rng, n_uniform: int = 1024,
                      n_near: int = 1024, sigma: float = 0.05):
    """Training queries in the canonical frame of ``box`` and their 0/1 labels.

    ``surface_pts`` are world-space GT surface samples; ``inside_fn`` maps
    world points to a boolean inside mask.
    """
    uni = rng.uniform(-CUBE_HALF, CUBE_HALF, size=(n_uniform, 3))
    pick = rng.choice(len(surface_pts), size=n_near, replace=len(surface_pts) < n_near)
    near = canonicalize(surface_pts[pick], box) + rng.normal(scale=sigma, size=(n_near, 3))
    q = np.concatenate([uni, near])
    world = rotate_z(q * np.array(box.size), box.yaw) + np.array(box.center)
    return q, inside_fn(world).astype(np.float64)
