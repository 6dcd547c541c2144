"""Two-level point hierarchy with rotation-invariant angular-histogram descriptors.

The fine level carries per-point descriptors for point matching; the coarse
level summarises larger patches and is used to nominate candidate visible
regions. Externally computed features can replace either level.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .geometry import GeometryError, PointCloud, estimate_normals

FINE_BINS = 11
COARSE_BINS = 22
NORMAL_K = 16
_MAX_FINE_NEIGHBORS = 64
_MAX_COARSE_NEIGHBORS = 768


@dataclass(frozen=True)
class HierarchicalCloud:
    fine_points: PointCloud
    coarse_points: PointCloud
    assignment: np.ndarray
    fine_features: Optional[np.ndarray] = None
    coarse_features: Optional[np.ndarray] = None

    @property
    def has_features(self) -> bool:
        return self.fine_features is not None and self.coarse_features is not None

    def region(self, coarse_idx: int) -> np.ndarray:
        """Fine-point indices assigned to one coarse point."""
        return np.flatnonzero(self.assignment == coarse_idx)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Voxel-grid centroids, ordered by voxel key. Normals, when present, are
    averaged per voxel."""
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, inv, cnt = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    pts = np.zeros((len(cnt), 3))
    np.add.at(pts, inv, cloud.points)
    pts /= cnt[:, None]
    normals = None
    if cloud.normals is not None:
        acc = np.zeros((len(cnt), 3))
        np.add.at(acc, inv, cloud.normals)
        norm = np.linalg.norm(acc, axis=1, keepdims=True)
        # opposing normals inside one voxel cancel; keep an arbitrary member's
        bad = norm[:, 0] < 1e-9
        if bad.any():
            first = np.full(len(cnt), -1)
            first[inv[::-1]] = np.arange(len(inv))[::-1]
            acc[bad] = cloud.normals[first[bad]]
            norm[bad] = 1.0
        normals = acc / norm
    return PointCloud(pts, normals)


def build_hierarchy(cloud: PointCloud, fine_voxel: float, coarse_voxel: float) -> HierarchicalCloud:
    if not 0 < fine_voxel < coarse_voxel:
        raise GeometryError("need 0 < fine_voxel < coarse_voxel")
    if not len(cloud):
        raise GeometryError("empty cloud")
    fine = voxel_downsample(cloud, fine_voxel)
    coarse = voxel_downsample(PointCloud(cloud.points), coarse_voxel)
    _, assignment = cKDTree(coarse.points).query(fine.points)
    return HierarchicalCloud(fine, coarse, np.asarray(assignment, dtype=np.int64))


def _soft_hist(values: np.ndarray, valid: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    """Per-row histogram with linear interpolation between bin centres."""
    pos = (values - lo) / (hi - lo) * bins - 0.5
    pos = np.clip(pos, 0.0, bins - 1.0)
    left = np.floor(pos).astype(np.int64)
    left = np.minimum(left, bins - 2) if bins > 1 else left
    frac = pos - left
    w = valid.astype(float)
    rows = np.repeat(np.arange(values.shape[0]), values.shape[1])
    hist = np.zeros((values.shape[0], bins))
    np.add.at(hist, (rows, left.ravel()), ((1 - frac) * w).ravel())
    np.add.at(hist, (rows, (left + 1).ravel()), (frac * w).ravel())
    return hist


def _pair_features(p, n_p, q, n_q):
    """Darboux-frame angle triplet between each source point and its neighbours.

    p, n_p: (N, 3); q, n_q: (N, K, 3). Returns (f_normal, f_direction, f_twist)
    and a mask of well-defined pairs.
    """
    d = q - p[:, None, :]
    dist = np.linalg.norm(d, axis=-1)
    ok = dist > 1e-12
    d = d / np.where(ok, dist, 1.0)[..., None]
    u = np.broadcast_to(n_p[:, None, :], d.shape)
    v = np.cross(u, d)
    vn = np.linalg.norm(v, axis=-1)
    ok &= vn > 1e-9
    v = v / np.where(ok, vn, 1.0)[..., None]
    w = np.cross(u, v)
    f1 = np.einsum("nki,nki->nk", v, n_q)
    f2 = np.einsum("nki,nki->nk", u, d)
    f3 = np.arctan2(np.einsum("nki,nki->nk", w, n_q), np.einsum("nki,nki->nk", u, n_q))
    return f1, f2, f3, ok


def _angle_histograms(p, n_p, q, n_q, valid, bins):
    f1, f2, f3, ok = _pair_features(p, n_p, q, n_q)
    ok &= valid
    h = np.concatenate([
        _soft_hist(f1, ok, -1.0, 1.0, bins),
        _soft_hist(f2, ok, -1.0, 1.0, bins),
        _soft_hist(f3, ok, -np.pi, np.pi, bins),
    ], axis=1)
    cnt = ok.sum(axis=1, keepdims=True)
    return h / np.maximum(cnt, 1), cnt[:, 0]


def _neighbours(tree: cKDTree, centres: np.ndarray, radius: float, kmax: int, n_total: int,
                exclude_self: bool):
    k = min(kmax + int(exclude_self), n_total)
    dist, idx = tree.query(centres, k=k, distance_upper_bound=radius)
    dist = dist.reshape(len(centres), k)
    idx = idx.reshape(len(centres), k)
    if exclude_self:
        dist, idx = dist[:, 1:], idx[:, 1:]
    valid = idx < n_total
    idx = np.where(valid, idx, 0)
    return idx, dist, valid


def _normalize_rows(f: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(f, axis=1, keepdims=True)
    if np.any(norm <= 0):
        raise GeometryError("cannot normalize an all-zero feature row")
    return f / norm


def fine_normals(h: HierarchicalCloud, viewpoint=None) -> np.ndarray:
    pts = h.fine_points.points
    normals = estimate_normals(pts, NORMAL_K, viewpoint)
    if h.fine_points.normals is not None:
        flip = np.einsum("ij,ij->i", normals, h.fine_points.normals) < 0
        normals[flip] *= -1
    return normals


def describe(h: HierarchicalCloud, radius_fine: float, radius_coarse: float,
             viewpoint=None) -> HierarchicalCloud:
    """Fill fine (33-d) and coarse (66-d) descriptors.

    Fine: fast point-feature histogram over neighbours within ``radius_fine``.
    Coarse: angle histogram of each coarse point against all fine points
    within ``radius_coarse``, using the patch normal. Normal orientation
    follows the fine cloud's stored normals, else faces ``viewpoint``, else
    points away from the centroid.
    """
    if radius_fine <= 0 or radius_coarse <= 0:
        raise GeometryError("descriptor radii must be positive")
    pts = h.fine_points.points
    if len(pts) < NORMAL_K:
        raise GeometryError(f"need at least {NORMAL_K} points for normal estimation, got {len(pts)}")
    normals = fine_normals(h, viewpoint)
    tree = cKDTree(pts)
    n = len(pts)

    idx, dist, valid = _neighbours(tree, pts, radius_fine, _MAX_FINE_NEIGHBORS, n, True)
    spfh, _ = _angle_histograms(pts, normals, pts[idx], normals[idx], valid, FINE_BINS)
    wgt = np.where(valid, 1.0 / np.maximum(dist, 1e-12), 0.0)
    k = np.maximum(valid.sum(axis=1, keepdims=True), 1)
    fpfh = spfh + np.einsum("nk,nkb->nb", wgt, spfh[idx]) / k
    # points without neighbours keep a flat histogram rather than zeros
    empty = ~fpfh.any(axis=1)
    fpfh[empty] = 1.0
    fine_feat = _normalize_rows(fpfh)

    centres = h.coarse_points.points
    cidx, _, cvalid = _neighbours(tree, centres, radius_coarse, _MAX_COARSE_NEIGHBORS, n, False)
    cn = _patch_normals(pts[cidx], normals[cidx], cvalid)
    coarse, _ = _angle_histograms(centres, cn, pts[cidx], normals[cidx], cvalid, COARSE_BINS)
    empty = ~coarse.any(axis=1)
    coarse[empty] = 1.0
    coarse_feat = _normalize_rows(coarse)

    return replace(h, fine_points=type(h.fine_points)(pts, normals),
                   fine_features=fine_feat, coarse_features=coarse_feat)


def _patch_normals(q: np.ndarray, nq: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Smallest-variance direction of each neighbourhood, oriented with the
    summed member normals."""
    w = valid[..., None].astype(float)
    cnt = np.maximum(w.sum(axis=1), 1.0)
    mean = (q * w).sum(axis=1) / cnt
    c = (q - mean[:, None, :]) * w
    cov = np.einsum("nki,nkj->nij", c, c)
    _, vecs = np.linalg.eigh(cov)
    normal = vecs[:, :, 0]
    ref = (nq * w).sum(axis=1)
    flip = np.einsum("ij,ij->i", normal, ref) < 0
    normal[flip] *= -1
    return normal


def ingest_features(h: HierarchicalCloud, fine: np.ndarray, coarse: np.ndarray) -> HierarchicalCloud:
    """Replace both descriptor levels with external features (rows re-normalized)."""
    fine = np.asarray(fine, dtype=float)
    coarse = np.asarray(coarse, dtype=float)
    if fine.ndim != 2 or fine.shape[0] != len(h.fine_points):
        raise GeometryError(f"fine features have {fine.shape[0]} rows, expected {len(h.fine_points)}")
    if coarse.ndim != 2 or coarse.shape[0] != len(h.coarse_points):
        raise GeometryError(
            f"coarse features have {coarse.shape[0]} rows, expected {len(h.coarse_points)}")
    return replace(h, fine_features=_normalize_rows(fine), coarse_features=_normalize_rows(coarse))


@dataclass(frozen=True)
class Whitener:
    """Affine map fitted on one cloud's features (mean removal + PCA whitening).

    Handcrafted histograms share a large common component, so raw cosine
    scores crowd near 1. Mapping model and scene features through the
    model's whitener spreads scores around 0, which is what the dustbin and
    softmax temperature in the matcher assume.
    """
    mean: np.ndarray
    transform: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray, ridge: float = 1e-4) -> "Whitener":
        f = np.asarray(features, dtype=float)
        mu = f.mean(axis=0)
        c = f - mu
        cov = c.T @ c / max(len(f) - 1, 1) + ridge * np.eye(f.shape[1])
        vals, vecs = np.linalg.eigh(cov)
        return cls(mu, vecs / np.sqrt(vals))

    def apply(self, features: np.ndarray) -> np.ndarray:
        out = (np.asarray(features, dtype=float) - self.mean) @ self.transform
        norm = np.linalg.norm(out, axis=1, keepdims=True)
        return out / np.where(norm > 0, norm, 1.0)


def fit_whiteners(h: HierarchicalCloud) -> tuple[Whitener, Whitener]:
    if not h.has_features:
        raise GeometryError("features missing")
    return Whitener.fit(h.fine_features), Whitener.fit(h.coarse_features)


def whiten(h: HierarchicalCloud, fine: Whitener, coarse: Whitener) -> HierarchicalCloud:
    if not h.has_features:
        raise GeometryError("features missing")
    return replace(h, fine_features=fine.apply(h.fine_features),
                   coarse_features=coarse.apply(h.coarse_features))
