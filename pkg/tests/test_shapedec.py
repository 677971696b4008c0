import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorscene.config import Config
from anchorscene.geometry import OrientedBox3, PointCloud, TriMesh, box_mesh, points_inside_mesh, sphere_template
from anchorscene.nnet import DenseNet, NetError, adam_step, grad_check
from anchorscene.shapedec import (
    ShapeEmbedding,
    align_to_scene,
    canonicalize,
    decode_occupancy,
    decoder_input,
    encode_shape,
    encoder_input,
    extract_mesh,
    field_to_mesh,
    grid_points,
    make_shape_nets,
    occupancy_samples,
    shape_loss_and_grads,
)

TINY = Config(feature_dim=4, shape_hidden=32, shape_dim=16, hidden_activation="tanh")


def _nets(seed=0):
    return make_shape_nets(TINY, seed)


def _feats(seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=4), rng.normal(size=4)


def test_encoder_duplicates_and_permutation():
    enc, _ = _nets()
    fv, fa = _feats()
    pts = np.random.default_rng(1).uniform(-0.5, 0.5, size=(40, 3))
    e = encode_shape(PointCloud(pts), fv, fa, enc)
    dup = encode_shape(PointCloud(np.concatenate([pts, pts[:7]])), fv, fa, enc)
    perm = encode_shape(PointCloud(pts[np.random.default_rng(2).permutation(40)]), fv, fa, enc)
    assert np.array_equal(e.f_shape, dup.f_shape) and np.array_equal(e.f_shape, perm.f_shape)
    assert not e.from_anchors_only


def test_encoder_matches_composition_oracle():
    enc, _ = _nets(3)
    fv, fa = _feats(4)
    pts = np.random.default_rng(5).uniform(-0.5, 0.5, size=(10, 3))
    rows = [enc.forward(np.concatenate([p, fv, fa])) for p in pts]
    np.testing.assert_allclose(encode_shape(PointCloud(pts), fv, fa, enc).f_shape, np.max(rows, axis=0),
                               rtol=0, atol=1e-14)


def test_empty_prior_falls_back_to_anchors():
    enc, _ = _nets()
    fv, fa = _feats()
    anchors = sphere_template(18).points * 0.3
    e = encode_shape(PointCloud(np.zeros((0, 3))), fv, fa, enc, anchors=anchors)
    assert e.from_anchors_only
    assert np.array_equal(e.f_shape, encode_shape(PointCloud(anchors), fv, fa, enc).f_shape)
    with pytest.raises(NetError):
        encode_shape(PointCloud(np.zeros((0, 3))), fv, fa, enc)


def test_zero_decoder_is_half():
    _, dec = _nets()
    occ, outside = decode_occupancy(ShapeEmbedding(np.ones(16)), grid_points(5), dec.zero_())
    assert np.all(occ == 0.5) and not outside


def test_out_of_cube_flag():
    _, dec = _nets()
    _, outside = decode_occupancy(ShapeEmbedding(np.ones(16)), [[0.6, 0.0, 0.0]], dec)
    assert outside


def test_batch_equals_per_query():
    _, dec = _nets(6)
    emb = ShapeEmbedding(np.random.default_rng(7).normal(size=16))
    q = np.random.default_rng(8).uniform(-0.5, 0.5, size=(50, 3))
    batch, _ = decode_occupancy(emb, q, dec)
    single = np.array([decode_occupancy(emb, x[None], dec)[0][0] for x in q])
    np.testing.assert_allclose(batch, single, rtol=0, atol=1e-15)


def test_shape_loss_gradients():
    enc, dec = _nets(9)
    fv, fa = _feats(10)
    rng = np.random.default_rng(11)
    inp = encoder_input(rng.uniform(-0.5, 0.5, size=(12, 3)), fv, fa)
    q = rng.uniform(-0.5, 0.5, size=(20, 3))
    lab = (np.linalg.norm(q, axis=1) < 0.3).astype(float)
    assert grad_check(dec, lambda d: (lambda r: (r[0], r[2]))(shape_loss_and_grads(inp, q, lab, enc, d)),
                      eps=1e-5) < 1e-4
    assert grad_check(enc, lambda e: (lambda r: (r[0], r[1]))(shape_loss_and_grads(inp, q, lab, e, dec)),
                      eps=1e-5) < 1e-4


def test_sphere_overfit():
    cfg = Config(feature_dim=4, shape_hidden=64, shape_dim=32, hidden_activation="tanh")
    enc, dec = make_shape_nets(cfg, 12)
    fv, fa = np.zeros(4), np.zeros(4)
    inp = encoder_input(sphere_template(64).points * 0.4, fv, fa)
    rng = np.random.default_rng(13)
    for _ in range(2000):
        q = rng.uniform(-0.5, 0.5, size=(256, 3))
        lab = (np.linalg.norm(q, axis=1) < 0.4).astype(float)
        _, te, td = shape_loss_and_grads(inp, q, lab, enc, dec)
        adam_step(enc, te, 3e-3)
        adam_step(dec, td, 3e-3)
    emb = encode_shape(PointCloud(sphere_template(64).points * 0.4), fv, fa, enc)
    g = grid_points(10)
    occ, _ = decode_occupancy(emb, g, dec)
    truth = (np.linalg.norm(g, axis=1) < 0.4).astype(float)
    assert np.mean(np.abs(occ - truth)) < 0.1


# -- mesh extraction ----------------------------------------------------------

def _sphere_field(res, radius=0.4, band=0.1):
    d = np.linalg.norm(grid_points(res), axis=1)
    return np.clip(0.5 - (d - radius) / band, 0.0, 1.0).reshape(res, res, res)


def test_sphere_volume_at_64():
    mesh, empty = field_to_mesh(_sphere_field(64))
    assert not empty
    want = 4.0 / 3.0 * math.pi * 0.4 ** 3
    assert abs(mesh.volume() - want) / want < 0.05


def test_constant_field_is_empty():
    mesh, empty = field_to_mesh(np.zeros((16, 16, 16)))
    assert empty and mesh.is_empty()
    mesh, empty = field_to_mesh(np.ones((16, 16, 16)))
    assert empty


def test_field_touching_cube_is_closed():
    mesh, _ = field_to_mesh(np.ones((8, 8, 8)) * np.linspace(0, 1, 8)[:, None, None])
    assert mesh.volume() > 0


def test_extract_mesh_argument_checks():
    _, dec = _nets()
    emb = ShapeEmbedding(np.zeros(16))
    with pytest.raises(NetError):
        extract_mesh(emb, dec, resolution=4)
    with pytest.raises(NetError):
        extract_mesh(emb, dec, iso=1.0)
    mesh, empty = extract_mesh(emb, dec.zero_(), resolution=8)
    assert empty


# -- frames -------------------------------------------------------------------

def test_identity_box_alignment():
    mesh = box_mesh((0.1, 0.0, -0.2), (0.3, 0.2, 0.1))
    out = align_to_scene(mesh, OrientedBox3((0, 0, 0), (1, 1, 1), 0.0))
    assert np.array_equal(out.vertices, mesh.vertices)
    assert np.array_equal(out.triangles, mesh.triangles)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_align_canonicalize_roundtrip(seed):
    rng = np.random.default_rng(seed)
    box = OrientedBox3(rng.normal(size=3), rng.uniform(0.2, 3.0, 3), rng.uniform(-math.pi, math.pi))
    mesh = TriMesh(rng.uniform(-0.5, 0.5, size=(30, 3)), rng.integers(0, 30, size=(20, 3)))
    out = align_to_scene(mesh, box)
    assert len(out.vertices) == len(mesh.vertices)
    assert np.array_equal(out.triangles, mesh.triangles)
    np.testing.assert_allclose(canonicalize(out.vertices, box), mesh.vertices, rtol=0, atol=1e-9)
    assert np.all(box.contains(out.vertices, margin=1e-9))


def test_occupancy_samples_labels():
    box = OrientedBox3((1.0, 2.0, 0.5), (1.0, 0.5, 1.0), 0.4)
    mesh = box_mesh(box.center, box.size, box.yaw)
    surf = np.random.default_rng(0).uniform(-0.5, 0.5, size=(100, 3))
    q, lab = occupancy_samples(box, surf, lambda p: points_inside_mesh(p, mesh), np.random.default_rng(1),
                               n_uniform=200, n_near=50)
    assert q.shape == (250, 3) and lab.shape == (250,)
    inside = np.all(np.abs(q) < 0.5, axis=1)
    border = np.any(np.abs(np.abs(q) - 0.5) < 1e-6, axis=1)
    assert np.array_equal(lab[~border].astype(bool), inside[~border])


def test_decoder_input_layout():
    rows = decoder_input(np.arange(3.0), np.zeros((2, 3)))
    assert rows.tolist() == [[0, 0, 0, 0, 1, 2]] * 2
    net = DenseNet([6, 1], "none")
    assert net.forward(rows).shape == (2, 1)
