"""Pose-error functions (VSD, MSSD, MSPD), Average Recall aggregation and
COCO-style mask AP/AR."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .geometry import CameraIntrinsics, DepthImage, GeometryError, Pose, TriangleMesh
from .render import render_depth

DEFAULT_DELTA = 15.0
FRACTIONS = tuple(np.round(np.arange(0.05, 0.501, 0.05), 2))
VSD_THETAS = FRACTIONS
MSPD_PX = tuple(float(x) for x in range(5, 51, 5))
IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
REC_THRESHOLDS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class VsdParams:
    tau: float
    delta: float = DEFAULT_DELTA
    thresholds: tuple = VSD_THETAS

    def __post_init__(self):
        if self.tau <= 0 or self.delta <= 0:
            raise GeometryError("tau and delta must be positive")


@dataclass(frozen=True)
class PoseErrorRecord:
    """Errors of the estimate matched to one ground-truth instance; ``None``
    marks an instance without an estimate."""
    scene_id: int
    im_id: int
    obj_id: int
    e_vsd: Optional[tuple] = None
    e_mssd: Optional[float] = None
    e_mspd: Optional[float] = None

    def key(self):
        return (self.scene_id, self.im_id, self.obj_id)


@dataclass(frozen=True)
class ArConfig:
    vsd_tau_fractions: tuple = FRACTIONS
    vsd_thetas: tuple = VSD_THETAS
    mssd_fractions: tuple = FRACTIONS
    mspd_px: tuple = MSPD_PX
    delta: float = DEFAULT_DELTA

    def vsd_taus(self, diameter: float) -> list[float]:
        return [f * diameter for f in self.vsd_tau_fractions]

    def to_dict(self) -> dict:
        return {"vsd_tau_fractions": list(self.vsd_tau_fractions), "vsd_thetas": list(self.vsd_thetas),
                "mssd_fractions": list(self.mssd_fractions), "mspd_px": list(self.mspd_px),
                "delta": self.delta}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArConfig":
        base = cls()
        return cls(tuple(d.get("vsd_tau_fractions", base.vsd_tau_fractions)),
                   tuple(d.get("vsd_thetas", base.vsd_thetas)),
                   tuple(d.get("mssd_fractions", base.mssd_fractions)),
                   tuple(d.get("mspd_px", base.mspd_px)),
                   float(d.get("delta", base.delta)))


# -- pose errors ---------------------------------------------------------------

def visibility_mask(rendered: np.ndarray, test: np.ndarray, delta: float) -> np.ndarray:
    """Rendered pixels not hidden behind the test surface by more than ``delta``."""
    return (rendered > 0) & ((rendered - test < delta) | (test <= 0))


def vsd_from_maps(d_est: np.ndarray, d_gt: np.ndarray, test: np.ndarray, taus: Sequence[float],
                  delta: float) -> list[float]:
    v_est = visibility_mask(d_est, test, delta)
    v_gt = visibility_mask(d_gt, test, delta)
    union = v_est | v_gt
    n = int(union.sum())
    if n == 0:
        return [1.0 for _ in taus]
    both = v_est & v_gt
    diff = np.abs(d_est - d_gt)
    return [float(n - np.count_nonzero(both & (diff < tau))) / n for tau in taus]


def vsd_errors(pred: Pose, gt: Pose, mesh: TriangleMesh, test_depth: DepthImage,
               taus: Sequence[float], delta: float = DEFAULT_DELTA) -> list[float]:
    """VSD for several misalignment tolerances from a single pair of renders."""
    cam = test_depth.intrinsics
    d_est = render_depth(mesh, pred, cam).depth.data
    d_gt = render_depth(mesh, gt, cam).depth.data
    return vsd_from_maps(d_est, d_gt, test_depth.data, taus, delta)


def vsd(pred: Pose, gt: Pose, mesh: TriangleMesh, test_depth: DepthImage, params: VsdParams) -> float:
    return vsd_errors(pred, gt, mesh, test_depth, [params.tau], params.delta)[0]


def _sym_gt_points(gt: Pose, mesh: TriangleMesh):
    v = mesh.vertices
    for s in mesh.symmetries:
        yield gt.transform(s.transform(v))


def mssd(pred: Pose, gt: Pose, mesh: TriangleMesh) -> float:
    est = pred.transform(mesh.vertices)
    return float(min(np.linalg.norm(est - g, axis=1).max() for g in _sym_gt_points(gt, mesh)))


def mspd(pred: Pose, gt: Pose, mesh: TriangleMesh, cam: CameraIntrinsics) -> float:
    est = pred.transform(mesh.vertices)
    if np.any(est[:, 2] <= 0):
        raise GeometryError("vertex behind the camera under the estimated pose")
    p_est = cam.project(est)
    best = np.inf
    for g in _sym_gt_points(gt, mesh):
        if np.any(g[:, 2] <= 0):
            raise GeometryError("vertex behind the camera under the ground-truth pose")
        best = min(best, float(np.linalg.norm(p_est - cam.project(g), axis=1).max()))
    return best


# -- AR ------------------------------------------------------------------------

def _mean_recall(correct: np.ndarray) -> float:
    """``correct``: (records, thresholds) booleans."""
    return float(correct.mean()) if correct.size else 0.0


def _vsd_correct(records, thetas, n_tau) -> np.ndarray:
    out = np.zeros((len(records), n_tau * len(thetas)), dtype=bool)
    for i, r in enumerate(records):
        if r.e_vsd is None:
            continue
        e = np.asarray(r.e_vsd, dtype=float)
        if len(e) != n_tau:
            raise GeometryError(f"record {r.key()} has {len(e)} VSD errors, expected {n_tau}")
        out[i] = (e[:, None] < np.asarray(thetas)[None, :]).ravel()
    return out


def _recalls(records, diameters, image_width, cfg: ArConfig) -> dict:
    r_px = image_width / 640.0
    n_tau = len(cfg.vsd_tau_fractions)
    mssd_ok = np.zeros((len(records), len(cfg.mssd_fractions)), dtype=bool)
    mspd_ok = np.zeros((len(records), len(cfg.mspd_px)), dtype=bool)
    for i, r in enumerate(records):
        if r.obj_id not in diameters:
            raise GeometryError(f"missing diameter for object {r.obj_id}")
        d = diameters[r.obj_id]
        if r.e_mssd is not None:
            mssd_ok[i] = r.e_mssd < np.asarray(cfg.mssd_fractions) * d
        if r.e_mspd is not None:
            mspd_ok[i] = r.e_mspd < np.asarray(cfg.mspd_px) * r_px
    ar_vsd = _mean_recall(_vsd_correct(records, cfg.vsd_thetas, n_tau))
    ar_mssd = _mean_recall(mssd_ok)
    ar_mspd = _mean_recall(mspd_ok)
    return {"AR": (ar_vsd + ar_mssd + ar_mspd) / 3.0, "AR_VSD": ar_vsd,
            "AR_MSSD": ar_mssd, "AR_MSPD": ar_mspd, "n_gt": len(records)}


def pose_ar(records: Sequence[PoseErrorRecord], diameters: Mapping[int, float], image_width: int,
            config: ArConfig = ArConfig()) -> dict:
    """Average Recall over the VSD, MSSD and MSPD threshold grids.

    Every record stands for one ground-truth instance, so instances without
    an estimate count as misses.
    """
    for r in records:
        if r.obj_id not in diameters:
            raise GeometryError(f"missing diameter for object {r.obj_id}")
    records = sorted(records, key=lambda r: r.key())
    report = _recalls(records, diameters, image_width, config)
    per_obj = defaultdict(list)
    for r in records:
        per_obj[r.obj_id].append(r)
    report["per_object"] = {str(o): _recalls(rs, diameters, image_width, config)
                            for o, rs in sorted(per_obj.items())}
    return report


# -- segmentation AP/AR --------------------------------------------------------

@dataclass(frozen=True)
class ScoredMask:
    image_id: object
    obj_id: int
    mask: np.ndarray
    score: float = 1.0


def mask_iou(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> np.ndarray:
    if not len(a) or not len(b):
        return np.zeros((len(a), len(b)))
    fa = np.stack([m.ravel() for m in a]).astype(np.float64)
    fb = np.stack([m.ravel() for m in b]).astype(np.float64)
    inter = fa @ fb.T
    union = fa.sum(1)[:, None] + fb.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def _match_image(dets, gts, thresholds):
    """Greedy COCO matching. Returns (len(thresholds), len(dets)) TP flags."""
    ious = mask_iou([d.mask for d in dets], [g.mask for g in gts])
    tp = np.zeros((len(thresholds), len(dets)), dtype=bool)
    for ti, thr in enumerate(thresholds):
        taken = np.zeros(len(gts), dtype=bool)
        for di in range(len(dets)):
            best, best_iou = -1, min(thr, 1 - 1e-10)
            for gi in range(len(gts)):
                if taken[gi] or ious[di, gi] < best_iou:
                    continue
                best, best_iou = gi, ious[di, gi]
            if best >= 0:
                taken[best] = True
                tp[ti, di] = True
    return tp


def seg_ap(preds: Sequence[ScoredMask], gts: Sequence[ScoredMask], max_dets: int = 100,
           iou_thresholds: Sequence[float] = IOU_THRESHOLDS) -> dict:
    """COCO-style mask AP (101-point interpolation) and AR@max_dets, averaged
    over IoU thresholds and object classes that have ground truth."""
    shapes = {m.mask.shape for m in list(preds) + list(gts)}
    if len(shapes) > 1:
        raise GeometryError(f"mask dimension mismatch: {sorted(shapes)}")
    classes = sorted({g.obj_id for g in gts})
    n_thr = len(iou_thresholds)
    ap = np.zeros((n_thr, len(classes)))
    ar = np.zeros((n_thr, len(classes)))
    for ci, c in enumerate(classes):
        by_img_gt, by_img_dt = defaultdict(list), defaultdict(list)
        for g in gts:
            if g.obj_id == c:
                by_img_gt[g.image_id].append(g)
        for d in preds:
            if d.obj_id == c:
                by_img_dt[d.image_id].append(d)
        n_gt = sum(len(v) for v in by_img_gt.values())
        scores, flags = [], []
        for img in sorted(set(by_img_gt) | set(by_img_dt), key=str):
            dets = sorted(by_img_dt[img], key=lambda d: -d.score)[:max_dets]
            if not dets:
                continue
            scores.append(np.array([d.score for d in dets]))
            flags.append(_match_image(dets, by_img_gt[img], iou_thresholds))
        if not scores:
            continue
        s = np.concatenate(scores)
        tp = np.concatenate(flags, axis=1)
        order = np.argsort(-s, kind="mergesort")
        tp = tp[:, order]
        for ti in range(n_thr):
            tps = np.cumsum(tp[ti])
            fps = np.cumsum(~tp[ti])
            rc = tps / n_gt
            pr = tps / np.maximum(tps + fps, np.spacing(1))
            ar[ti, ci] = rc[-1] if len(rc) else 0.0
            pr = np.maximum.accumulate(pr[::-1])[::-1]
            idx = np.searchsorted(rc, REC_THRESHOLDS, side="left")
            q = np.where(idx < len(pr), pr[np.minimum(idx, len(pr) - 1)], 0.0)
            ap[ti, ci] = q.mean()
    if not classes:
        return {"AP": 0.0, "AR": 0.0, "per_object": {}}
    return {"AP": float(ap.mean()), "AR": float(ar.mean()),
            "AP50": float(ap[0].mean()) if n_thr else 0.0,
            "per_object": {str(c): {"AP": float(ap[:, i].mean()), "AR": float(ar[:, i].mean())}
                           for i, c in enumerate(classes)}}
