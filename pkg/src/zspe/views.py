"""Deterministic SO(3) view sampling and template camera placement."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import CameraIntrinsics, GeometryError, Pose, matrix_to_quat, quat_to_matrix

DEFAULT_VIEWS = 72
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))

# (viewing direction, image-down direction) in object coordinates
_AXIS_VIEWS = [
    ((0, 0, 1), (0, 1, 0)),
    ((0, 0, -1), (0, 1, 0)),
    ((1, 0, 0), (0, 1, 0)),
    ((-1, 0, 0), (0, 1, 0)),
    ((0, 1, 0), (0, 0, 1)),
    ((0, -1, 0), (0, 0, 1)),
]


@dataclass(frozen=True)
class ViewSet:
    rotations: tuple
    distance: float

    def __len__(self):
        return len(self.rotations)


def look_rotation(direction, down) -> np.ndarray:
    """Camera-to-object rotation whose optical axis is ``direction``."""
    z = np.asarray(direction, dtype=float)
    z = z / np.linalg.norm(z)
    y = np.asarray(down, dtype=float)
    y = y - z * (y @ z)
    y /= np.linalg.norm(y)
    return np.stack([np.cross(y, z), y, z], axis=1)


def _split_count(n: int) -> tuple[int, int]:
    """Factor ``n`` into (sphere points, circle points) with balanced spacing.

    Equal spacing on S2 and S1 asks for a circle count near cbrt(pi * n).
    """
    target = np.cbrt(np.pi * n)
    divisors = [d for d in range(1, n + 1) if n % d == 0]
    n_circle = min(divisors, key=lambda d: (abs(np.log(d / target)), d))
    return n // n_circle, n_circle


def hopf_grid(n_sphere: int, n_circle: int) -> np.ndarray:
    """Quaternions (w, x, y, z) from a Fibonacci S2 set crossed with a uniform S1 set."""
    i = np.arange(n_sphere)
    theta = np.arccos(np.clip(1.0 - (2.0 * i + 1.0) / n_sphere, -1.0, 1.0))
    phi = np.mod(i * GOLDEN_ANGLE, 2 * np.pi)
    psi = 2 * np.pi * (np.arange(n_circle) + 0.5) / n_circle
    theta = np.repeat(theta, n_circle)
    phi = np.repeat(phi, n_circle)
    psi = np.tile(psi, n_sphere)
    ct, st = np.cos(theta / 2), np.sin(theta / 2)
    return np.stack([
        ct * np.cos(psi / 2),
        ct * np.sin(psi / 2),
        st * np.cos(phi + psi / 2),
        st * np.sin(phi + psi / 2),
    ], axis=1)


def sample_so3(n: int) -> list[np.ndarray]:
    """``n`` deterministic rotations covering SO(3).

    ``n == 6`` gives the six axis-aligned views (front, back, left, right,
    up, down); otherwise a Hopf-fibration grid.
    """
    if n < 1:
        raise GeometryError("view count must be >= 1")
    if n == 6:
        return [look_rotation(d, u) for d, u in _AXIS_VIEWS]
    quats = hopf_grid(*_split_count(n))
    return list(quat_to_matrix(quats))


def view_set(n: int = DEFAULT_VIEWS, distance: float = 1.0) -> ViewSet:
    return ViewSet(tuple(sample_so3(n)), float(distance))


def quat_distance(q_a: np.ndarray, q_b: np.ndarray) -> np.ndarray:
    """Arc length on S3 modulo sign, i.e. half the relative rotation angle."""
    return np.arccos(np.clip(np.abs(q_a @ q_b.T), 0.0, 1.0))


def dispersion(rotations: Sequence[np.ndarray], n_probe: int = 100_000, seed: int = 0) -> float:
    """Monte-Carlo estimate of the covering radius (max over random rotations
    of the S3 distance to the nearest sample)."""
    grid = matrix_to_quat(np.asarray(rotations))
    rng = np.random.default_rng(seed)
    probe = rng.normal(size=(n_probe, 4))
    probe /= np.linalg.norm(probe, axis=1, keepdims=True)
    worst = 0.0
    for i in range(0, n_probe, 8192):
        # nearest sample = max |dot|
        best = np.abs(probe[i:i + 8192] @ grid.T).max(axis=1)
        worst = max(worst, float(np.arccos(np.clip(best.min(), 0.0, 1.0))))
    return worst


def template_poses(views: ViewSet, object_center=(0.0, 0.0, 0.0)) -> list[Pose]:
    """Object-to-camera poses that place ``object_center`` on the optical axis
    at ``views.distance`` for every view rotation."""
    if views.distance <= 0:
        raise GeometryError("template distance must be positive")
    c = np.asarray(object_center, dtype=float)
    out = []
    for r_view in views.rotations:
        r = np.asarray(r_view).T
        out.append(Pose(r, np.array([0.0, 0.0, views.distance]) - r @ c))
    return out


def camera_center(pose: Pose) -> np.ndarray:
    """Camera optical centre in object coordinates."""
    return -pose.R.T @ pose.t


def template_camera(size: int = 128, half_fov: float = np.pi / 4) -> CameraIntrinsics:
    f = (size / 2.0) / np.tan(half_fov)
    return CameraIntrinsics(f, f, size / 2.0, size / 2.0, size, size)


def min_template_distance(radius: float, half_fov: float = np.pi / 4) -> float:
    return 2.5 * radius / np.tan(half_fov)
