"""Procedural meshes: primitives for tests and a small set of asymmetric
demo objects for the synthetic benchmark."""
from __future__ import annotations

import numpy as np

from .geometry import Pose, TriangleMesh, axis_angle


def box(sx: float = 1.0, sy: float = 1.0, sz: float = 1.0, symmetries=None) -> TriangleMesh:
    """Axis-aligned box centred at the origin, outward-facing triangles."""
    x, y, z = sx / 2, sy / 2, sz / 2
    v = np.array([[-x, -y, -z], [x, -y, -z], [x, y, -z], [-x, y, -z],
                  [-x, -y, z], [x, -y, z], [x, y, z], [-x, y, z]])
    f = [[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7], [0, 1, 5], [0, 5, 4],
         [2, 3, 7], [2, 7, 6], [1, 2, 6], [1, 6, 5], [3, 0, 4], [3, 4, 7]]
    return TriangleMesh(v, np.array(f), symmetries or (Pose(),))


def box_symmetries() -> tuple:
    """The four proper rotations preserving a box with distinct side lengths."""
    return tuple(Pose(np.diag(d)) for d in ([1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]))


def icosphere(radius: float = 1.0, subdivisions: int = 3) -> TriangleMesh:
    p = (1 + 5 ** 0.5) / 2
    v = [[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0], [0, -1, p], [0, 1, p],
         [0, -1, -p], [0, 1, -p], [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(x, dtype=float) / np.linalg.norm(x) for x in v]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = nf
    return TriangleMesh(np.array(verts) * radius, np.array(f))


def _ear_clip(poly: np.ndarray) -> list[list[int]]:
    """Triangulate a simple counter-clockwise polygon."""
    idx = list(range(len(poly)))
    tris = []

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    guard = 0
    while len(idx) > 3 and guard < 10_000:
        guard += 1
        for k in range(len(idx)):
            i0, i1, i2 = idx[k - 1], idx[k], idx[(k + 1) % len(idx)]
            a, b, c = poly[i0], poly[i1], poly[i2]
            if cross(a, b, c) <= 0:
                continue
            if any(cross(a, b, poly[j]) >= 0 and cross(b, c, poly[j]) >= 0 and cross(c, a, poly[j]) >= 0
                   for j in idx if j not in (i0, i1, i2)):
                continue
            tris.append([i0, i1, i2])
            idx.pop(k)
            break
    tris.append(idx[:3])
    return tris


def extrude(outline, height: float, taper: float = 1.0) -> TriangleMesh:
    """Prism over a CCW polygon; the top face is scaled by ``taper`` about the
    outline centroid. The mesh is re-centred on its vertex centroid."""
    poly = np.asarray(outline, dtype=float)
    n = len(poly)
    c = poly.mean(axis=0)
    top = c + (poly - c) * taper
    v = np.vstack([np.c_[poly, np.zeros(n)], np.c_[top, np.full(n, height)]])
    cap = _ear_clip(poly)
    f = [[a, c2, b] for a, b, c2 in cap]  # bottom faces down
    f += [[a + n, b + n, c2 + n] for a, b, c2 in cap]
    for i in range(n):
        j = (i + 1) % n
        f += [[i, j, j + n], [i, j + n, i + n]]
    v = v - v.mean(axis=0)
    return TriangleMesh(v, np.array(f))


def demo_models() -> dict[int, TriangleMesh]:
    """Four asymmetric objects, 60-110 mm across."""
    l_shape = extrude([[0, 0], [70, 0], [70, 22], [24, 22], [24, 55], [0, 55]], 30.0)
    tee = extrude([[0, 0], [80, 0], [80, 20], [50, 20], [50, 60], [30, 60], [30, 20], [0, 20]],
                  25.0, taper=0.8)
    stairs = extrude([[0, 0], [75, 0], [75, 18], [50, 18], [50, 36], [25, 36], [25, 54], [0, 54]],
                     40.0)
    arrow = extrude([[0, 0], [60, 0], [60, 30], [85, 30], [40, 70], [0, 40]], 28.0, taper=0.75)
    # tilt the arrow so its cap is not axis-aligned in object space
    arrow = arrow.transformed(Pose(axis_angle([1, 1, 0], 0.3)))
    return {1: l_shape, 2: tee, 3: stairs, 4: arrow}


def blob(radius: float = 45.0, n_bumps: int = 7, seed: int = 0, subdivisions: int = 4,
         amplitude: float = 0.35) -> TriangleMesh:
    """Sphere displaced by random Gaussian bumps and dents."""
    rng = np.random.default_rng(seed)
    base = icosphere(1.0, subdivisions)
    d = base.vertices
    centres = rng.normal(size=(n_bumps, 3))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    amps = rng.uniform(-0.5, 1.0, n_bumps) * amplitude
    widths = rng.uniform(0.3, 0.7, n_bumps)
    r = 1.0 + sum(a * np.exp(-np.sum((d - c) ** 2, axis=1) / w ** 2)
                  for a, c, w in zip(amps, centres, widths))
    return TriangleMesh(d * r[:, None] * radius, base.triangles)
