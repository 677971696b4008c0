import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorscene.backbone import dual_branch_encode, make_backbone_nets, set_abstraction
from anchorscene.config import Config
from anchorscene.geometry import GeometryError, PointCloud
from anchorscene.nnet import DenseNet

SMALL = Config(min_scan_points=64, sa1_centroids=32, sa2_centroids=8, sa1_hidden=8, feature_dim=16)


def test_single_point_single_centroid():
    net = DenseNet([5, 6, 4], "tanh", seed=0)
    feat = np.array([[0.3, -0.7]])
    seeds = set_abstraction(PointCloud([[1.0, 2.0, 3.0]], feat), 1, 0.2, net)
    expected = net.forward(np.array([0.0, 0.0, 0.0, 0.3, -0.7]))
    np.testing.assert_allclose(seeds.features[0], expected, rtol=0, atol=1e-15)
    assert np.array_equal(seeds.positions.points, [[1.0, 2.0, 3.0]])


def test_duplicate_points_match_single():
    net = DenseNet([4, 6, 4], "relu", seed=1)
    one = set_abstraction(PointCloud([[0.5, 0.5, 0.5]], [[0.2]]), 1, 0.3, net)
    dup = set_abstraction(PointCloud([[0.5, 0.5, 0.5]] * 5, [[0.2]] * 5), 1, 0.3, net)
    assert np.array_equal(one.features, dup.features)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 1, size=(60, 3))
    feats = rng.normal(size=(60, 2))
    net = DenseNet([5, 8, 6], "relu", seed=2)
    a = set_abstraction(PointCloud(pts, feats), 10, 0.3, net)
    perm = rng.permutation(60)
    b = set_abstraction(PointCloud(pts[perm], feats[perm]), 10, 0.3, net)
    np.testing.assert_allclose(a.features, b.features, rtol=0, atol=1e-9)
    assert np.array_equal(a.positions.points, b.positions.points)


def test_too_many_centroids():
    with pytest.raises(GeometryError):
        set_abstraction(PointCloud(np.zeros((3, 3))), 4, 0.1, DenseNet([3, 2], "none"))


def _branch_nets(seed):
    return make_backbone_nets(SMALL, seed)


def test_dual_branch_deterministic_and_subset():
    pts = np.random.default_rng(3).uniform(0, 2, size=(200, 3))
    o1, w1 = dual_branch_encode(PointCloud(pts), _branch_nets(0), _branch_nets(10), SMALL)
    o2, w2 = dual_branch_encode(PointCloud(pts), _branch_nets(0), _branch_nets(10), SMALL)
    assert o1.features.tobytes() == o2.features.tobytes()
    assert w1.features.tobytes() == w2.features.tobytes()
    assert o1.features.shape == (8, 16) and w1.features.shape == (8, 16)
    rows = {tuple(p) for p in pts}
    assert all(tuple(p) in rows for p in o1.positions.points)
    assert not np.array_equal(o1.features, w1.features)


def test_dual_branch_permutation_invariant():
    rng = np.random.default_rng(4)
    pts = rng.uniform(0, 2, size=(200, 3))
    a, _ = dual_branch_encode(PointCloud(pts), _branch_nets(0), _branch_nets(10), SMALL)
    b, _ = dual_branch_encode(PointCloud(pts[rng.permutation(200)]), _branch_nets(0), _branch_nets(10), SMALL)
    np.testing.assert_allclose(a.features, b.features, rtol=0, atol=1e-9)


def test_insufficient_points():
    with pytest.raises(GeometryError, match="insufficient points"):
        dual_branch_encode(PointCloud(np.zeros((10, 3))), _branch_nets(0), _branch_nets(10), SMALL)


def test_default_width_is_128():
    cfg = Config()
    sa1, sa2 = make_backbone_nets(cfg, 0)
    assert sa2.out_dim == 128 and sa1.in_dim == 4
