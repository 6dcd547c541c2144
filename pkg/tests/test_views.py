import numpy as np
import pytest

from zspe.geometry import GeometryError, Pose, is_rotation
from zspe.shapes import box
from zspe.views import (ViewSet, camera_center, dispersion, min_template_distance, sample_so3,
                        template_camera, template_poses, view_set)


def _key(r):
    return tuple(np.round(r, 9).ravel())


def test_six_views_are_axis_aligned():
    rots = sample_so3(6)
    axes = {tuple(np.round(r[:, 2]).astype(int)) for r in rots}
    assert axes == {(0, 0, 1), (0, 0, -1), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0)}
    for r in rots:
        assert np.allclose(np.abs(r), np.round(np.abs(r)))  # signed permutation matrices
        assert is_rotation(r)


@pytest.mark.parametrize("n", [6, 12, 72, 512, 576])
def test_valid_and_distinct(n):
    rots = sample_so3(n)
    assert len(rots) == n
    assert all(is_rotation(r) for r in rots)
    assert len({_key(r) for r in rots}) == n


def test_deterministic():
    a, b = sample_so3(72), sample_so3(72)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_dispersion_72_below_bound():
    assert dispersion(sample_so3(72)) < 0.62


def test_dispersion_monotone_under_doubling():
    d = [dispersion(sample_so3(n), n_probe=50_000) for n in (36, 72, 144, 288, 576, 1152)]
    assert all(b <= a for a, b in zip(d, d[1:]))


def test_dispersion_of_single_rotation():
    # every probe is at most pi/2 away on S3 modulo sign
    assert dispersion([np.eye(3)], n_probe=20_000) <= np.pi / 2


def test_invalid_count():
    with pytest.raises(GeometryError):
        sample_so3(0)
    with pytest.raises(GeometryError):
        template_poses(ViewSet((np.eye(3),), 0.0))


def test_identity_view_places_camera_behind_object():
    (pose,) = template_poses(ViewSet((np.eye(3),), 250.0))
    assert np.allclose(camera_center(pose), [0, 0, -250.0])
    assert np.allclose(pose.R, np.eye(3))


def test_centre_projects_to_principal_point():
    cam = template_camera()
    centre = np.array([3.0, -7.0, 11.0])
    for pose in template_poses(view_set(72, 300.0), centre):
        uv = cam.project(pose.transform(centre[None]))[0]
        assert np.allclose(uv, [cam.cx, cam.cy], atol=1.0)


def test_cube_corners_inside_every_view():
    cube = box()
    r = np.sqrt(3) / 2
    cam = template_camera()
    for pose in template_poses(view_set(72, min_template_distance(r))):
        uv = cam.project(pose.transform(cube.vertices))
        assert np.all((uv >= 0) & (uv <= [cam.width, cam.height]))
