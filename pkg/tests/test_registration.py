import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zspe.geometry import Pose, is_rotation, quat_to_matrix, random_rotation, rotation_angle
from zspe.matcher import CorrespondenceSet
from zspe.registration import RegistrationError, kabsch, register, register_points, residuals
from zspe.descriptor import HierarchicalCloud
from zspe.geometry import PointCloud

seeds = st.integers(0, 2**31)


def sse(pose, p, q):
    return float(np.sum(residuals(pose, p, q) ** 2))


def test_identity():
    p = np.random.default_rng(0).normal(size=(30, 3))
    pose = kabsch(p, p)
    assert np.allclose(pose.R, np.eye(3), atol=1e-12) and np.allclose(pose.t, 0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_exact_recovery(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(25, 3)) * 40
    truth = Pose.random(rng, 300.0)
    est = kabsch(p, truth.transform(p))
    assert np.linalg.norm(est.R - truth.R) < 1e-9
    assert np.linalg.norm(est.t - truth.t) < 1e-9


def test_beats_rotation_grid_oracle():
    rng = np.random.default_rng(7)
    p = rng.normal(size=(20, 3)) * 50
    truth = Pose.random(rng, 100.0)
    q = truth.transform(p) + rng.normal(0, 1.0, p.shape)
    est = kabsch(p, q)
    best = np.inf
    pc, qc = p - p.mean(0), q - q.mean(0)
    for _ in range(10):
        quat = rng.normal(size=(100_000, 4))
        rots = quat_to_matrix(quat / np.linalg.norm(quat, axis=1, keepdims=True))
        # optimal t for fixed R aligns the centroids
        err = np.sum((np.einsum("nij,kj->nki", rots, pc) - qc) ** 2, axis=(1, 2))
        best = min(best, float(err.min()))
    assert sse(est, p, q) <= sse(truth, p, q) + 1e-9
    assert sse(est, p, q) <= best + 1e-9


def test_reflection_is_corrected():
    rng = np.random.default_rng(2)
    p = rng.normal(size=(10, 3))
    q = p * [1, 1, -1]  # mirror image; no proper rotation fits exactly
    est = kabsch(p, q)
    assert is_rotation(est.R) and np.linalg.det(est.R) > 0


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_equivariance_and_weight_scale(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(15, 3)) * 30
    q = Pose.random(rng).transform(p) + rng.normal(0, 2.0, p.shape)
    w = rng.random(15) + 0.1
    base = kabsch(p, q, w)
    qq = Pose.random(rng, 200.0)
    moved = kabsch(p, qq.transform(q), w)
    assert np.allclose(moved.matrix(), (qq @ base).matrix(), atol=1e-6)
    scaled = kabsch(p, q, w * 37.0)
    assert np.allclose(scaled.matrix(), base.matrix(), atol=1e-9)


def test_degenerate_inputs():
    line = np.c_[np.arange(5.0), np.zeros(5), np.zeros(5)]
    with pytest.raises(RegistrationError):
        kabsch(line, line + 1)
    with pytest.raises(RegistrationError):
        kabsch(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(RegistrationError):
        kabsch(np.eye(3), np.eye(3), [-1, 1, 1])


def _corr_problem(seed, n=300, outliers=0.3, noise=1.0, groups=20):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(2000, 3))
    surf = d / np.linalg.norm(d, axis=1, keepdims=True) * [50, 35, 25]
    truth = Pose(random_rotation(rng), rng.uniform(-100, 100, 3) + [0, 0, 600])
    m = surf[rng.choice(len(surf), n, replace=False)]
    s = truth.transform(m) + rng.normal(0, noise, m.shape)
    bad = rng.random(n) < outliers
    s[bad] = truth.transform(surf[rng.choice(len(surf), bad.sum())])
    centres = m[rng.choice(n, groups, replace=False)]
    g = np.argmin(np.linalg.norm(m[:, None] - centres[None], axis=-1), axis=1)
    return m, s, g, truth, bad


def test_exact_correspondences_all_inliers():
    m, s, g, truth, _ = _corr_problem(0, outliers=0.0, noise=0.0)
    res = register_points(m, s, np.ones(len(m)), g, 5.0)
    assert np.allclose(res.pose.matrix(), truth.matrix(), atol=1e-9)
    assert res.inlier_count == len(m) and res.inlier_fraction == 1.0


@pytest.mark.parametrize("seed", range(10))
def test_planted_pose_with_outliers(seed):
    m, s, g, truth, _ = _corr_problem(seed)
    res = register_points(m, s, np.ones(len(m)), g, 5.0)
    assert np.degrees(rotation_angle(res.pose.R, truth.R)) < 2.0
    assert np.linalg.norm(res.pose.t - truth.t) < 0.02 * 50
    assert np.all(np.diff(res.rmse_history) <= 1e-12)
    assert len(res.rmse_history) <= 6


def test_all_random_pairs_degrade_gracefully():
    rng = np.random.default_rng(4)
    m = rng.normal(size=(200, 3)) * 40
    s = rng.normal(size=(200, 3)) * 40
    res = register_points(m, s, np.ones(200), rng.integers(0, 10, 200), 4.0)
    assert res.pose.is_valid()
    assert res.inlier_fraction < 0.2


def test_register_uses_region_pairs():
    m, s, g, truth, _ = _corr_problem(5, n=120, outliers=0.0, noise=0.0, groups=6)
    n = len(m)
    model = HierarchicalCloud(PointCloud(m), PointCloud(m[:6]), g)
    scene = HierarchicalCloud(PointCloud(s), PointCloud(s[:6]), g)
    idx = np.arange(n)
    corr = CorrespondenceSet(idx, idx, np.ones(n), g, g)
    res = register(model, scene, corr, 5.0)
    assert np.allclose(res.pose.matrix(), truth.matrix(), atol=1e-9)
    with pytest.raises(RegistrationError):
        register(model, scene, CorrespondenceSet.empty(), 5.0)
    with pytest.raises(RegistrationError):
        register(model, scene, corr, 0.0)
