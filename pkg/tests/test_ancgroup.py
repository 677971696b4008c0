import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorscene.ancgroup import (
    AnchorSet,
    anchor_loss,
    anchor_loss_grad,
    deform_anchors,
    deform_backward,
    deform_forward,
    group_anchor_features,
    group_backward,
    group_forward,
    sample_instance_points,
)
from anchorscene.backbone import SeedSet
from anchorscene.geometry import (
    PointCloud,
    TriMesh,
    interpolate_features,
    rotate_z,
    sample_mesh_surface,
    sphere_template,
)
from anchorscene.nnet import DenseNet, NetError, adam_step, grad_check
from anchorscene.synthdata import object_parts

D = 16
TEMPLATE = sphere_template(18)


def _deform_net(seed=0, d=D, scale=1.0):
    net = DenseNet([3 + d, 24, 3], ["tanh", "tanh"], seed=seed)
    for W in net.weights:
        W *= scale
    return net


def test_zero_net_translates_template():
    net = _deform_net().zero_()
    a = deform_anchors(TEMPLATE, np.ones(D), [5.0, 0.0, 0.0], net)
    assert np.array_equal(a.offsets, np.zeros((18, 3)))
    np.testing.assert_allclose(a.deformed.points, TEMPLATE.points + [5.0, 0.0, 0.0], rtol=0, atol=1e-14)
    assert np.array_equal(a.deformed.points, a.template.points + [5.0, 0.0, 0.0])


def test_width_mismatch():
    with pytest.raises(NetError):
        deform_anchors(TEMPLATE, np.ones(D + 1), np.zeros(3), _deform_net())
    relu_tail = DenseNet([3 + D, 3], "relu")
    with pytest.raises(NetError):
        deform_anchors(TEMPLATE, np.ones(D), np.zeros(3), relu_tail)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 1000.0))
def test_structural_invariants(seed, scale):
    rng = np.random.default_rng(seed)
    net = _deform_net(seed, scale=scale)
    c = rng.normal(scale=10, size=3)
    a = deform_anchors(TEMPLATE, rng.normal(scale=scale, size=D), c, net)
    assert np.array_equal(a.deformed.points - a.offsets - a.center, a.template.points)
    np.testing.assert_allclose(a.template.points, TEMPLATE.points, rtol=0, atol=1e-13)
    np.testing.assert_allclose(a.center, c, rtol=0, atol=1e-13)
    assert np.all(np.abs(a.offsets) < 1.0)
    assert np.abs(a.deformed.points - c).max() < 2.0


def test_anchor_loss_zero_on_gt():
    pts = np.random.default_rng(0).normal(size=(18, 3))
    a = AnchorSet(TEMPLATE, PointCloud(pts), np.zeros((18, 3)), np.zeros(3))
    assert anchor_loss(a, PointCloud(pts)) == 0.0


def test_anchor_loss_rigid_invariance():
    rng = np.random.default_rng(1)
    anc, gt = rng.normal(size=(18, 3)), rng.normal(size=(64, 3))
    a = AnchorSet(TEMPLATE, PointCloud(anc), np.zeros((18, 3)), np.zeros(3))
    t, yaw = rng.normal(size=3), 0.7
    b = AnchorSet(TEMPLATE, PointCloud(rotate_z(anc, yaw) + t), np.zeros((18, 3)), np.zeros(3))
    assert abs(anchor_loss(a, PointCloud(gt)) - anchor_loss(b, PointCloud(rotate_z(gt, yaw) + t))) < 1e-9


def _anchor_loss_fn(f_vote, center, gt):
    def fn(net):
        anc, _, cache = deform_forward(TEMPLATE.points, f_vote[None], center[None], net)
        v, g = anchor_loss_grad(anc[0], gt)
        tape, _, _ = deform_backward(net, cache, g[None])
        return v, tape
    return fn


def test_anchor_loss_gradient_through_deform_net():
    rng = np.random.default_rng(2)
    gt = rng.normal(scale=0.5, size=(40, 3))
    err = grad_check(_deform_net(3), _anchor_loss_fn(rng.normal(size=D), np.zeros(3), gt), eps=1e-5)
    assert err < 1e-4


def test_deform_backward_feature_and_center_grads():
    rng = np.random.default_rng(3)
    net = _deform_net(4)
    fv, c = rng.normal(size=(2, D)), rng.normal(size=(2, 3))
    up = rng.normal(size=(2, 18, 3))
    anc, _, cache = deform_forward(TEMPLATE.points, fv, c, net)
    _, g_fv, g_c = deform_backward(net, cache, up)
    eps = 1e-6
    for i, j in [(0, 0), (1, 5), (0, D - 1)]:
        p, m = fv.copy(), fv.copy()
        p[i, j] += eps
        m[i, j] -= eps
        num = (np.sum(up * deform_forward(TEMPLATE.points, p, c, net)[0])
               - np.sum(up * deform_forward(TEMPLATE.points, m, c, net)[0])) / (2 * eps)
        assert abs(num - g_fv[i, j]) < 1e-6 * max(1, abs(num))
    np.testing.assert_allclose(g_c, up.sum(axis=1), rtol=0, atol=1e-12)


def test_overfit_chair_anchors():
    parts = object_parts("chair", np.random.default_rng(5))
    gt = sample_mesh_surface(TriMesh.concatenate(parts), 512, 0).points
    gt = gt - gt.mean(0)
    net = DenseNet([3 + D, 64, 64, 3], ["tanh", "tanh", "tanh"], seed=6)
    fv = np.random.default_rng(7).normal(size=D)
    fn = _anchor_loss_fn(fv, np.zeros(3), gt)
    first, _ = fn(net)
    for _ in range(200):
        _, tape = fn(net)
        adam_step(net, tape, 1e-2)
    last, _ = fn(net)
    assert last * 10 <= first


# -- feature grouping ---------------------------------------------------------

def _seedset(n=30, d=D, seed=0):
    rng = np.random.default_rng(seed)
    return SeedSet(PointCloud(rng.uniform(-1, 1, size=(n, 3))), rng.normal(size=(n, d)))


def _anchorset(pts):
    return AnchorSet(TEMPLATE, PointCloud(pts), np.zeros((len(pts), 3)), np.zeros(3))


def test_constant_features_identity_fuse():
    s = _seedset()
    v = np.random.default_rng(1).normal(size=D)
    s.features[:] = v
    ident = DenseNet.from_layers([(np.eye(D), np.zeros(D), "none")])
    anc = _anchorset(np.random.default_rng(2).uniform(-1, 1, size=(18, 3)))
    np.testing.assert_allclose(group_anchor_features(s, anc, ident), v, rtol=0, atol=1e-12)


def test_grouping_matches_oracle_and_is_order_free():
    s = _seedset(seed=3)
    fuse = DenseNet([D, D], "relu", seed=4)
    pts = np.random.default_rng(5).uniform(-1, 1, size=(18, 3))
    got = group_anchor_features(s, _anchorset(pts), fuse)
    per = [fuse.forward(interpolate_features(PointCloud(s.positions.points, s.features), p[None])[0]) for p in pts]
    np.testing.assert_allclose(got, np.mean(per, axis=0), rtol=0, atol=1e-12)
    perm = np.random.default_rng(6).permutation(18)
    np.testing.assert_allclose(group_anchor_features(s, _anchorset(pts[perm]), fuse), got, rtol=0, atol=1e-12)


def test_group_backward_matches_finite_differences():
    s = _seedset(seed=7)
    fuse = DenseNet([D, D], "tanh", seed=8)
    anc = np.random.default_rng(9).uniform(-1, 1, size=(2, 18, 3))
    up = np.random.default_rng(10).normal(size=(2, D))

    def f(seed_feat, anchors):
        return float(np.sum(up * group_forward(s.positions.points, seed_feat, anchors, fuse)[0]))

    _, saved = group_forward(s.positions.points, s.features, anc, fuse)
    tape, g_feat, g_anc = group_backward(fuse, s.positions.points, s.features, saved, up)
    eps = 1e-6
    for idx in [(0, 0, 0), (1, 7, 2), (0, 17, 1)]:
        p, m = anc.copy(), anc.copy()
        p[idx] += eps
        m[idx] -= eps
        num = (f(s.features, p) - f(s.features, m)) / (2 * eps)
        assert abs(num - g_anc[idx]) < 1e-5 * max(1, abs(num))
    for idx in [(0, 0), (12, 5), (29, D - 1)]:
        p, m = s.features.copy(), s.features.copy()
        p[idx] += eps
        m[idx] -= eps
        num = (f(p, anc) - f(m, anc)) / (2 * eps)
        assert abs(num - g_feat[idx]) < 1e-6 * max(1, abs(num))

    def loss_fn(net):
        out, sv = group_forward(s.positions.points, s.features, anc, net)
        t, _, _ = group_backward(net, s.positions.points, s.features, sv, up)
        return float(np.sum(up * out)), t

    assert grad_check(fuse, loss_fn, eps=1e-5) < 1e-4


# -- instance point sampling --------------------------------------------------

def _cluster_fixture():
    """18 anchors on a 0.3 m sphere, 32 more points hugging them, clutter far away."""
    anchors = TEMPLATE.points * 0.3 + [1.0, 1.0, 0.5]
    d = np.linalg.norm(anchors[:, None] - anchors[None], axis=2)
    r = d[d > 0].min()
    rng = np.random.default_rng(0)
    extra = []
    for k in range(32):
        v = rng.normal(size=3)
        extra.append(anchors[k % 18] + v / np.linalg.norm(v) * 0.3 * r)
    cluster = np.concatenate([anchors, np.array(extra)])
    clutter = rng.uniform(4, 6, size=(200, 3))
    return cluster, clutter, anchors, r


def test_isolated_cluster_exact():
    cluster, clutter, anchors, r = _cluster_fixture()
    scan = PointCloud(np.concatenate([clutter[:100], cluster, clutter[100:]]))
    want = set(range(100, 150))
    one = sample_instance_points(scan, anchors, iterations=1)
    two = sample_instance_points(scan, anchors, iterations=2)
    assert abs(one.radius - r) < 1e-12 and not one.degenerate
    assert set(one.indices.tolist()) == want
    assert set(two.indices.tolist()) == want
    assert len(two.augmented) == 50 + 18


def test_no_points_near_anchors():
    scan = PointCloud(np.random.default_rng(1).uniform(10, 11, size=(50, 3)))
    out = sample_instance_points(scan, TEMPLATE.points)
    assert len(out.prior) == 0


def test_degenerate_anchors_use_floor():
    scan = PointCloud([[0.0, 0.0, 0.0], [0.01, 0.0, 0.0], [0.5, 0.0, 0.0]])
    out = sample_instance_points(scan, np.zeros((18, 3)), radius_floor=0.02)
    assert out.degenerate and out.radius == 0.02
    assert out.indices.tolist() == [0, 1]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_subset_and_monotone(seed):
    rng = np.random.default_rng(seed)
    scan = PointCloud(rng.uniform(0, 2, size=(300, 3)))
    anchors = rng.uniform(0.8, 1.2, size=(18, 3))
    prev = set()
    for k in (1, 2, 3):
        out = sample_instance_points(scan, anchors, iterations=k)
        cur = set(out.indices.tolist())
        assert prev <= cur
        assert np.array_equal(out.prior.points, scan.points[out.indices])
        prev = cur


def test_bad_iterations():
    with pytest.raises(ValueError):
        sample_instance_points(PointCloud(np.zeros((3, 3))), TEMPLATE.points, iterations=0)
