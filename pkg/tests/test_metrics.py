import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zspe.geometry import (CameraIntrinsics, DepthImage, GeometryError, Pose, TriangleMesh,
                           random_rotation)
from zspe.metrics import (ArConfig, PoseErrorRecord, ScoredMask, VsdParams, mspd, mssd, pose_ar,
                          seg_ap, vsd, vsd_errors)
from zspe.render import render_depth, render_scene
from zspe.shapes import blob, box, box_symmetries

CAM = CameraIntrinsics(300.0, 300.0, 40.0, 30.0, 80, 60)
BIG = CameraIntrinsics(572.4, 573.6, 325.3, 242.0, 640, 480)


def random_mesh(rng, n=100):
    v = rng.normal(size=(n, 3)) * [40, 30, 20]
    f = np.array([[i, (i + 1) % n, (i + 2) % n] for i in range(0, n, 3)])
    return TriangleMesh(v, f, box_symmetries())


def front_pose(rng, z=600.0):
    return Pose(random_rotation(rng), [rng.uniform(-20, 20), rng.uniform(-20, 20), z])


# -- vsd ---------------------------------------------------------------------

def literal_vsd(d_est, d_gt, test, tau, delta):
    """Per-pixel transcription of the VSD definition."""
    h, w = test.shape
    union = 0
    cost = 0
    for y in range(h):
        for x in range(w):
            ve = d_est[y, x] > 0 and (d_est[y, x] - test[y, x] < delta or test[y, x] == 0)
            vg = d_gt[y, x] > 0 and (d_gt[y, x] - test[y, x] < delta or test[y, x] == 0)
            if not (ve or vg):
                continue
            union += 1
            if ve and vg and abs(d_est[y, x] - d_gt[y, x]) < tau:
                continue
            cost += 1
    return 1.0 if union == 0 else cost / union


def test_vsd_identity_and_axis_shift():
    mesh = box(40, 40, 40)
    gt = Pose(np.eye(3), [0, 0, 400])
    test = render_depth(mesh, gt, CAM).depth
    params = VsdParams(tau=10.0)
    assert vsd(gt, gt, mesh, test, params) == 0.0
    shifted = Pose(np.eye(3), [0, 0, 420])
    empty = DepthImage(np.zeros((60, 80)), CAM)
    assert vsd(shifted, gt, mesh, empty, params) == 1.0


def test_vsd_empty_union_is_one():
    mesh = box(10, 10, 10)
    behind = Pose(np.eye(3), [0, 0, -100])
    assert vsd(behind, behind, mesh, DepthImage(np.zeros((60, 80)), CAM), VsdParams(5.0)) == 1.0


@pytest.mark.parametrize("seed", range(3))
def test_vsd_matches_literal_reference(seed):
    rng = np.random.default_rng(seed)
    mesh = blob(radius=25.0, seed=seed, subdivisions=3)
    gt = front_pose(rng, 500.0)
    occluder = box(30, 30, 5)
    test, _ = render_scene([mesh, occluder], [gt, Pose(np.eye(3), [15, 0, 430])], CAM)
    pred = Pose(gt.R, gt.t + rng.normal(0, 6, 3))
    taus = [5.0, 12.5, 30.0]
    got = vsd_errors(pred, gt, mesh, test, taus, 15.0)
    d_est = render_depth(mesh, pred, CAM).depth.data
    d_gt = render_depth(mesh, gt, CAM).depth.data
    for tau, g in zip(taus, got):
        assert abs(g - literal_vsd(d_est, d_gt, test.data, tau, 15.0)) <= 1e-12
        assert 0.0 <= g <= 1.0


# -- mssd / mspd -------------------------------------------------------------

def brute_mssd(pred, gt, mesh):
    best = np.inf
    for s in mesh.symmetries:
        worst = 0.0
        for x in mesh.vertices:
            a = pred.R @ x + pred.t
            b = gt.R @ (s.R @ x + s.t) + gt.t
            worst = max(worst, float(np.sqrt(np.sum((a - b) ** 2))))
        best = min(best, worst)
    return best


def brute_mspd(pred, gt, mesh, cam):
    def proj(p):
        return np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])
    best = np.inf
    for s in mesh.symmetries:
        worst = 0.0
        for x in mesh.vertices:
            a = proj(pred.R @ x + pred.t)
            b = proj(gt.R @ (s.R @ x + s.t) + gt.t)
            worst = max(worst, float(np.sqrt(np.sum((a - b) ** 2))))
        best = min(best, worst)
    return best


def test_mssd_examples():
    mesh = blob(seed=1, subdivisions=2)
    gt = Pose(np.eye(3), [0, 0, 500])
    assert mssd(gt, gt, mesh) == 0.0
    assert mssd(Pose(gt.R, gt.t + [3, 0, 0]), gt, mesh) == pytest.approx(3.0, abs=1e-12)
    sym = box(30, 40, 50, box_symmetries())
    for s in sym.symmetries:
        assert mssd(gt @ s, gt, sym) == pytest.approx(0.0, abs=1e-12)
        assert mspd(gt @ s, gt, sym, BIG) == pytest.approx(0.0, abs=1e-9)


def test_mspd_constant_depth_shift():
    z, dx = 800.0, 4.0
    flat = TriangleMesh(np.array([[-20, -20, 0], [20, -20, 0], [0, 25, 0]], float), np.array([[0, 1, 2]]))
    gt = Pose(np.eye(3), [0, 0, z])
    pred = Pose(np.eye(3), [dx, 0, z])
    assert mspd(gt, gt, flat, BIG) == 0.0
    assert mspd(pred, gt, flat, BIG) == pytest.approx(BIG.fx * dx / z, abs=1e-9)


def test_mspd_rejects_vertices_behind_camera():
    mesh = box(10, 10, 10)
    with pytest.raises(GeometryError):
        mspd(Pose(np.eye(3), [0, 0, 2]), Pose(np.eye(3), [0, 0, 500]), mesh, BIG)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_mssd_mspd_match_double_loops(seed):
    rng = np.random.default_rng(seed)
    mesh = random_mesh(rng)
    gt, pred = front_pose(rng), front_pose(rng, 650.0)
    assert abs(mssd(pred, gt, mesh) - brute_mssd(pred, gt, mesh)) < 1e-9
    assert abs(mspd(pred, gt, mesh, BIG) - brute_mspd(pred, gt, mesh, BIG)) < 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_error_invariances(seed):
    rng = np.random.default_rng(seed)
    mesh = random_mesh(rng)
    gt, pred = front_pose(rng), front_pose(rng, 620.0)
    q = Pose.random(rng, 300.0)
    assert abs(mssd(q @ pred, q @ gt, mesh) - mssd(pred, gt, mesh)) < 1e-9
    shifted = CameraIntrinsics(BIG.fx, BIG.fy, BIG.cx + 57.0, BIG.cy - 31.0, BIG.width, BIG.height)
    assert abs(mspd(pred, gt, mesh, shifted) - mspd(pred, gt, mesh, BIG)) < 1e-9


# -- AR ----------------------------------------------------------------------

DIAMS = {1: 100.0, 2: 200.0}


def fixture_records():
    return [
        PoseErrorRecord(0, 0, 1, (0.12,) * 10, 12.0, 7.0),
        PoseErrorRecord(0, 0, 1, (0.0,) * 5 + (1.0,) * 5, 50.0, 4.9),
        PoseErrorRecord(0, 1, 2, (0.3,) * 10, 29.0, 50.0),
        PoseErrorRecord(0, 1, 2),
    ]


def test_ar_hand_counted_table():
    rep = pose_ar(fixture_records(), DIAMS, 640)
    # MSSD: 12 mm beats 15..50 (8); 50 beats nothing (strict <); 29 of 200 beats 30..100 (8)
    assert rep["AR_MSSD"] == 16 / 40
    # MSPD: 7 px beats 10..50 (9); 4.9 beats all (10); 50 beats none
    assert rep["AR_MSPD"] == 19 / 40
    # VSD: 0.12 passes 8 thetas at every tau; half the taus pass all; 0.3 passes 4
    assert rep["AR_VSD"] == 170 / 400
    assert rep["AR"] == (170 / 400 + 16 / 40 + 19 / 40) / 3
    assert rep["per_object"]["1"]["AR_MSSD"] == 8 / 20
    assert rep["per_object"]["2"]["AR_VSD"] == 40 / 200


def test_ar_extremes():
    perfect = [PoseErrorRecord(0, i, 1, (0.0,) * 10, 0.0, 0.0) for i in range(3)]
    assert pose_ar(perfect, DIAMS, 640)["AR"] == 1.0
    missing = [PoseErrorRecord(0, i, 1) for i in range(3)]
    assert pose_ar(missing, DIAMS, 640)["AR"] == 0.0


def test_ar_mspd_scales_with_width():
    rec = [PoseErrorRecord(0, 0, 1, None, None, 12.0)]
    assert pose_ar(rec, DIAMS, 640)["AR_MSPD"] == 8 / 10
    assert pose_ar(rec, DIAMS, 1280)["AR_MSPD"] == 9 / 10


def test_ar_errors():
    with pytest.raises(GeometryError):
        pose_ar([PoseErrorRecord(0, 0, 3)], DIAMS, 640)
    with pytest.raises(GeometryError):
        pose_ar([PoseErrorRecord(0, 0, 1, (0.1,) * 3, 1.0, 1.0)], DIAMS, 640)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(1.0, 3.0))
def test_ar_monotone_in_thresholds(seed, factor):
    rng = np.random.default_rng(seed)
    recs = [PoseErrorRecord(0, i, int(rng.integers(1, 3)), tuple(rng.random(10)), float(rng.uniform(0, 80)),
                            float(rng.uniform(0, 60))) for i in range(8)]
    base = ArConfig()
    big = ArConfig(base.vsd_tau_fractions, tuple(t * factor for t in base.vsd_thetas),
                   tuple(t * factor for t in base.mssd_fractions), tuple(t * factor for t in base.mspd_px))
    assert pose_ar(recs, DIAMS, 640, big)["AR"] >= pose_ar(recs, DIAMS, 640, base)["AR"]


# -- segmentation AP ---------------------------------------------------------

def rect(x0, x1, y0=0, y1=4, shape=(10, 20)):
    m = np.zeros(shape, bool)
    m[y0:y1, x0:x1] = True
    return m


def test_seg_perfect():
    gts = [ScoredMask("a", 1, rect(0, 5)), ScoredMask("a", 2, rect(10, 15)), ScoredMask("b", 1, rect(3, 9))]
    preds = [ScoredMask(g.image_id, g.obj_id, g.mask, 1.0) for g in gts]
    rep = seg_ap(preds, gts)
    assert rep["AP"] == 1.0 and rep["AR"] == 1.0


def test_seg_no_predictions():
    rep = seg_ap([], [ScoredMask("a", 1, rect(0, 5))])
    assert rep["AP"] == 0.0 and rep["AR"] == 0.0


def test_seg_false_positive_ranked_first():
    gts = [ScoredMask("a", 1, rect(0, 5)), ScoredMask("a", 1, rect(10, 15))]
    preds = [ScoredMask("a", 1, rect(6, 9), 0.9), ScoredMask("a", 1, rect(0, 5), 0.8)]
    rep = seg_ap(preds, gts)
    # PR points: (r=0, p=0), (r=0.5, p=0.5); interpolated precision 0.5 for the
    # 51 recall thresholds 0.00..0.50 and 0 above
    assert rep["AP"] == pytest.approx(51 * 0.5 / 101, abs=1e-6)
    assert rep["AR"] == pytest.approx(0.5, abs=1e-6)


def test_seg_partial_iou_counts_low_thresholds_only():
    gt = rect(0, 10, 0, 1)
    pred = rect(0, 7, 0, 1)  # IoU 0.7 -> matched at 0.50..0.70, five of ten thresholds
    rep = seg_ap([ScoredMask(0, 1, pred)], [ScoredMask(0, 1, gt)])
    assert rep["AP"] == pytest.approx(0.5, abs=1e-12)


def test_seg_classes_do_not_cross_match():
    gt = [ScoredMask(0, 1, rect(0, 5))]
    pred = [ScoredMask(0, 2, rect(0, 5))]
    assert seg_ap(pred, gt)["AP"] == 0.0


def test_seg_dimension_mismatch():
    with pytest.raises(GeometryError):
        seg_ap([ScoredMask(0, 1, np.ones((3, 3), bool))], [ScoredMask(0, 1, np.ones((4, 4), bool))])
