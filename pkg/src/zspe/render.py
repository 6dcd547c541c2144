"""CPU z-buffer rasterizer producing camera-space depth maps."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import CameraIntrinsics, DepthImage, Pose, TriangleMesh

NEAR = 1e-6
_EDGE_EPS = 1e-9


@dataclass(frozen=True)
class RenderedDepth:
    depth: DepthImage
    object_mask: np.ndarray


def _rasterize(zbuf: np.ndarray, ids: np.ndarray, verts: np.ndarray, tris: np.ndarray,
               cam: CameraIntrinsics, obj_id: int) -> None:
    h, w = zbuf.shape
    z = verts[:, 2]
    uv = np.empty((len(verts), 2))
    front = z > NEAR
    uv[front] = cam.project(verts[front])
    for tri in tris:
        tz = z[tri]
        if np.any(tz <= NEAR):
            # no near-plane clipping; partially visible triangles are dropped
            continue
        (u0, v0), (u1, v1), (u2, v2) = uv[tri]
        area = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
        if abs(area) < 1e-12:
            continue
        umin = max(int(np.ceil(min(u0, u1, u2))), 0)
        umax = min(int(np.floor(max(u0, u1, u2))), w - 1)
        vmin = max(int(np.ceil(min(v0, v1, v2))), 0)
        vmax = min(int(np.floor(max(v0, v1, v2))), h - 1)
        if umin > umax or vmin > vmax:
            continue
        pu, pv = np.meshgrid(np.arange(umin, umax + 1, dtype=float),
                             np.arange(vmin, vmax + 1, dtype=float))
        # screen-space barycentrics
        l0 = ((u1 - pu) * (v2 - pv) - (u2 - pu) * (v1 - pv)) / area
        l1 = ((u2 - pu) * (v0 - pv) - (u0 - pu) * (v2 - pv)) / area
        l2 = 1.0 - l0 - l1
        inside = (l0 >= -_EDGE_EPS) & (l1 >= -_EDGE_EPS) & (l2 >= -_EDGE_EPS)
        if not inside.any():
            continue
        # perspective-correct: 1/z is affine in screen space
        depth = 1.0 / (l0 / tz[0] + l1 / tz[1] + l2 / tz[2])
        sub = zbuf[vmin:vmax + 1, umin:umax + 1]
        closer = inside & (depth < sub)
        sub[closer] = depth[closer]
        ids[vmin:vmax + 1, umin:umax + 1][closer] = obj_id


def render_scene(meshes: Sequence[TriangleMesh], poses: Sequence[Pose],
                 cam: CameraIntrinsics) -> tuple[DepthImage, np.ndarray]:
    """Render several meshes into one depth map.

    Returns the depth image and a label image holding the index of the
    visible mesh per pixel (-1 for background).
    """
    zbuf = np.full((cam.height, cam.width), np.inf)
    ids = np.full((cam.height, cam.width), -1, dtype=np.int64)
    for k, (mesh, pose) in enumerate(zip(meshes, poses)):
        _rasterize(zbuf, ids, pose.transform(mesh.vertices), mesh.triangles, cam, k)
    zbuf[~np.isfinite(zbuf)] = 0.0
    return DepthImage(zbuf, cam), ids


def render_depth(mesh: TriangleMesh, pose: Pose, cam: CameraIntrinsics) -> RenderedDepth:
    depth, ids = render_scene([mesh], [pose], cam)
    return RenderedDepth(depth, ids == 0)
