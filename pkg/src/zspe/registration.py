"""Rigid pose from weighted correspondences: closed-form SVD alignment plus
per-region hypotheses scored by global inlier voting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import GeometryError, Pose
from .matcher import CorrespondenceSet

MAX_REFIT = 5
_RANK_TOL = 1e-9


class RegistrationError(GeometryError):
    pass


@dataclass(frozen=True)
class RegistrationResult:
    pose: Pose
    inlier_count: int
    rmse: float
    score: float
    n_correspondences: int = 0
    rmse_history: tuple = field(default=())

    @property
    def inlier_fraction(self) -> float:
        return self.inlier_count / self.n_correspondences if self.n_correspondences else 0.0


def kabsch(model_pts, scene_pts, weights=None) -> Pose:
    """Weighted least-squares rigid transform mapping ``model_pts`` onto ``scene_pts``.

    Minimises sum_i w_i |R o_i + t - s_i|^2 with det(R) = +1; a reflection is
    corrected by negating the least significant singular direction.
    """
    p = np.asarray(model_pts, dtype=float).reshape(-1, 3)
    q = np.asarray(scene_pts, dtype=float).reshape(-1, 3)
    if len(p) != len(q):
        raise RegistrationError("point sets differ in length")
    w = np.ones(len(p)) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if len(w) != len(p):
        raise RegistrationError("weights differ in length")
    if np.any(w < 0) or not np.any(w > 0):
        raise RegistrationError("weights must be non-negative and not all zero")
    if np.count_nonzero(w) < 3:
        raise RegistrationError("need at least 3 weighted pairs")
    w = w / w.sum()
    p_mean = w @ p
    q_mean = w @ q
    pc = p - p_mean
    qc = q - q_mean
    sw = np.sqrt(w)[:, None]
    sv = np.linalg.svd(pc * sw, compute_uv=False)
    if sv[0] <= 0 or sv[1] <= _RANK_TOL * sv[0]:
        raise RegistrationError("degenerate (collinear) correspondence configuration")
    h = (pc * w[:, None]).T @ qc
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose(r, q_mean - r @ p_mean)


def residuals(pose: Pose, model_pts, scene_pts) -> np.ndarray:
    return np.linalg.norm(pose.transform(model_pts) - scene_pts, axis=1)


def _weighted_rmse(res: np.ndarray, w: np.ndarray) -> float:
    return float(np.sqrt(np.sum(w * res ** 2) / np.sum(w)))


def register_points(model_pts: np.ndarray, scene_pts: np.ndarray, confidence: np.ndarray,
                    groups: np.ndarray, inlier_radius: float) -> RegistrationResult:
    """Local-to-global registration on explicit correspondence arrays.

    ``groups`` labels the source region of every correspondence; each group
    with at least three members proposes a pose.
    """
    n = len(model_pts)
    if n == 0:
        raise RegistrationError("insufficient correspondences")
    conf = np.asarray(confidence, dtype=float)
    best = None
    for g in np.unique(groups):
        sel = groups == g
        if sel.sum() < 3:
            continue
        try:
            hyp = kabsch(model_pts[sel], scene_pts[sel], conf[sel])
        except RegistrationError:
            continue
        res = residuals(hyp, model_pts, scene_pts)
        inl = res < inlier_radius
        cnt = int(inl.sum())
        rmse = _weighted_rmse(res[inl], conf[inl]) if cnt else np.inf
        if best is None or cnt > best[1] or (cnt == best[1] and rmse < best[2]):
            best = (hyp, cnt, rmse, inl)
    if best is None:
        raise RegistrationError("insufficient correspondences")

    pose, cnt, rmse, inl = best
    history = [rmse]
    for _ in range(MAX_REFIT):
        if cnt < 3:
            break
        try:
            cand = kabsch(model_pts[inl], scene_pts[inl], conf[inl])
        except RegistrationError:
            break
        res = residuals(cand, model_pts, scene_pts)
        new_inl = res < inlier_radius
        new_cnt = int(new_inl.sum())
        if new_cnt < 3:
            break
        new_rmse = _weighted_rmse(res[new_inl], conf[new_inl])
        if new_rmse > rmse:
            break
        stable = np.array_equal(new_inl, inl)
        pose, cnt, rmse, inl = cand, new_cnt, new_rmse, new_inl
        history.append(rmse)
        if stable:
            break
    score = float(conf[inl].mean()) if cnt else 0.0
    return RegistrationResult(pose, cnt, float(rmse) if cnt else 0.0, score, n, tuple(history))


def register(model, scene, corr: CorrespondenceSet, inlier_radius: float) -> RegistrationResult:
    """Register hierarchical clouds from fine-level correspondences."""
    if inlier_radius <= 0:
        raise RegistrationError("inlier radius must be positive")
    if not len(corr):
        raise RegistrationError("insufficient correspondences")
    groups = corr.model_region * (int(corr.scene_region.max()) + 1) + corr.scene_region
    return register_points(model.fine_points.points[corr.model_idx],
                           scene.fine_points.points[corr.scene_idx],
                           corr.confidence, groups, inlier_radius)
