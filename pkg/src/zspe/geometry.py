"""Core geometric types and operations.

All lengths are millimeters. Poses map object coordinates into camera
coordinates: ``x_cam = R @ x_obj + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    """Raised on invalid geometric input."""


def is_rotation(m, tol: float = ORTHO_TOL) -> bool:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        return False
    return bool(np.allclose(m.T @ m, np.eye(3), atol=tol) and abs(np.linalg.det(m) - 1.0) < tol)


def orthonormalize(m) -> np.ndarray:
    """Project a near-rotation matrix onto SO(3)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rotation matrix from an axis and an angle in radians (Rodrigues)."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def quat_to_matrix(q) -> np.ndarray:
    """Unit quaternions (w, x, y, z), shape (..., 4), to rotation matrices (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
        2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
        2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m) -> np.ndarray:
    """Rotation matrices (..., 3, 3) to unit quaternions (w, x, y, z) with w >= 0."""
    m = np.asarray(m, dtype=float)
    flat = m.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, r in enumerate(flat):
        # Shepperd's method: pick the largest diagonal term for stability.
        tr = np.trace(r)
        cand = np.array([tr, r[0, 0], r[1, 1], r[2, 2]])
        k = int(np.argmax(cand))
        if k == 0:
            s = np.sqrt(1.0 + tr) * 2
            q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif k == 1:
            s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif k == 2:
            s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        out[i] = q if q[0] >= 0 else -q
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out.reshape(m.shape[:-2] + (4,))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform random rotation."""
    return quat_to_matrix(rng.normal(size=4))


def rotation_angle(r_a, r_b) -> float:
    """Geodesic angle (radians) between two rotations."""
    c = (np.trace(np.asarray(r_a).T @ np.asarray(r_b)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class Pose:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.R, dtype=float)
        t = np.array(self.t, dtype=float).reshape(3)
        if r.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {r.shape}")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", r)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def random(cls, rng: np.random.Generator, trans_scale: float = 100.0) -> "Pose":
        return cls(random_rotation(rng), rng.uniform(-trans_scale, trans_scale, 3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    __matmul__ = compose

    def transform(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        return is_rotation(self.R, tol) and bool(np.all(np.isfinite(self.t)))


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=float).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise GeometryError("normals and points differ in count")
            if len(nrm) and not np.allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-6):
                raise GeometryError("normals must have unit length")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        return PointCloud(self.points[idx], None if self.normals is None else self.normals[idx])

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    symmetries: Sequence[Pose] = (Pose(),)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        f = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise GeometryError("triangle index out of range")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)
        syms = tuple(self.symmetries)
        if not any(np.allclose(s.R, np.eye(3)) and np.allclose(s.t, 0) for s in syms):
            syms = (Pose(),) + syms
        for s in syms:
            if not is_rotation(s.R, 1e-6):
                raise GeometryError("symmetry rotation is not in SO(3)")
        object.__setattr__(self, "symmetries", syms)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        n = np.cross(b - a, c - a)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def validate(self) -> None:
        if not len(self.triangles):
            raise GeometryError("mesh has no triangles")
        if np.any(self.triangle_areas() <= 0):
            raise GeometryError("mesh has degenerate triangles")

    def transformed(self, pose: Pose) -> "TriangleMesh":
        return TriangleMesh(pose.transform(self.vertices), self.triangles, self.symmetries)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("image size must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def project(self, points) -> np.ndarray:
        """Pinhole projection of camera-frame points to (u, v) pixel coordinates."""
        p = np.asarray(points, dtype=float)
        z = p[..., 2]
        return np.stack([self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy], axis=-1)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class DepthImage:
    data: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        d = np.array(self.data, dtype=float)
        if d.shape != (self.intrinsics.height, self.intrinsics.width):
            raise GeometryError(
                f"depth shape {d.shape} does not match intrinsics "
                f"{(self.intrinsics.height, self.intrinsics.width)}")
        if np.any(d < 0):
            raise GeometryError("negative depth")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape


def project_depth(depth: DepthImage, mask) -> PointCloud:
    """Back-project masked pixels with valid depth into camera-frame points."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != depth.shape:
        raise GeometryError(f"mask shape {mask.shape} != depth shape {depth.shape}")
    cam = depth.intrinsics
    v, u = np.nonzero(mask & (depth.data > 0))
    d = depth.data[v, u]
    pts = np.stack([(u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d], axis=1)
    return PointCloud(pts)


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform surface sampling; normals are the face normals."""
    if n < 1:
        raise GeometryError("n must be >= 1")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if not len(areas) or total <= 0:
        raise GeometryError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    # uniform barycentrics: (1 - sqrt(r1), sqrt(r1)(1 - r2), sqrt(r1) r2)
    w = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    tri = mesh.vertices[mesh.triangles[face]]
    pts = np.einsum("ij,ijk->ik", w, tri)
    return PointCloud(pts, mesh.face_normals()[face])


def circumradius(cloud: PointCloud) -> float:
    """Largest distance from the centroid to any point."""
    if not len(cloud):
        raise GeometryError("empty cloud")
    return float(np.linalg.norm(cloud.points - cloud.centroid(), axis=1).max())


def apply_pose(pose: Pose, cloud: PointCloud) -> PointCloud:
    normals = None if cloud.normals is None else cloud.normals @ pose.R.T
    return PointCloud(pose.transform(cloud.points), normals)


def mesh_diameter(mesh: TriangleMesh) -> float:
    """Maximum pairwise vertex distance."""
    v = mesh.vertices
    if len(v) < 2:
        raise GeometryError("diameter needs at least two vertices")
    # The farthest pair lies on the convex hull; fall back to a chunked scan if qhull fails.
    try:
        from scipy.spatial import ConvexHull
        v = v[ConvexHull(v).vertices]
    except Exception:
        pass
    best = 0.0
    for i in range(0, len(v), 1024):
        d = np.linalg.norm(v[i:i + 1024, None, :] - v[None, :, :], axis=-1)
        best = max(best, float(d.max()))
    return best


def estimate_normals(points, k: int = 16, viewpoint=None) -> np.ndarray:
    """Local-PCA normals from ``k`` nearest neighbours.

    With ``viewpoint`` given, normals face it (scene clouds); otherwise they
    point away from the cloud centroid (model clouds).
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) < 3:
        raise GeometryError("need at least 3 points to estimate normals")
    k = min(k, len(pts))
    _, idx = cKDTree(pts).query(pts, k=k)
    nb = pts[idx] - pts[idx].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    ref = (np.asarray(viewpoint, dtype=float) - pts) if viewpoint is not None else (pts - pts.mean(axis=0))
    flip = np.einsum("ij,ij->i", normals, ref) < 0
    normals[flip] *= -1
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)
