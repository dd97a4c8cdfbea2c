import numpy as np
import pytest

from omnigs.geometry import (PLANE_AXES, CameraModel, VolumeSpec, camera_rays_plucker, pillar_points,
                             pixel_grid, plane_pillar_points, project_point, ray_directions,
                             ray_length_per_z, unproject_pixel, voxel_to_world, world_in_volume,
                             world_to_grid, world_to_plane_uv)

from conftest import make_cam


def test_pixel_center_convention(cam):
    u, v = pixel_grid(cam)
    assert u[0, 0] == 0.5 and v[0, 0] == 0.5
    assert u[2, 5] == 5.5 and v[2, 5] == 2.5


def test_unproject_then_project_roundtrip(cam):
    rng = np.random.default_rng(0)
    u = rng.uniform(0, cam.width, 200)
    v = rng.uniform(0, cam.height, 200)
    d = rng.uniform(0.5, 30, 200)
    p = unproject_pixel(cam, u, v, d)
    pu, pv, z, ok = project_point(cam, p)
    assert ok.all()
    np.testing.assert_allclose(pu, u, atol=1e-9)
    np.testing.assert_allclose(pv, v, atol=1e-9)
    # d is along-ray distance, so it exceeds camera z off-axis
    np.testing.assert_allclose(np.linalg.norm(p - cam.center, axis=-1), d, rtol=1e-12)
    assert np.all(z <= d + 1e-12)


def test_unproject_rejects_nonpositive_depth(cam):
    with pytest.raises(ValueError):
        unproject_pixel(cam, 1.0, 1.0, 0.0)


def test_project_behind_camera_invalid(cam):
    behind = cam.center - np.array([2.0, 0.0, 0.0])
    assert not project_point(cam, behind)[3]


def test_ray_length_factor_matches_unit_rays(cam):
    u, v = pixel_grid(cam)
    r = ray_directions(cam, u, v)
    z_comp = (r @ cam.rotation.T)[..., 2]
    np.testing.assert_allclose(ray_length_per_z(cam), 1.0 / z_comp, rtol=1e-12)


def test_plucker_moment_is_orthogonal(cam):
    pl = camera_rays_plucker(cam)
    assert pl.shape == (cam.height, cam.width, 6)
    np.testing.assert_allclose(np.linalg.norm(pl[..., :3], axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose((pl[..., :3] * pl[..., 3:]).sum(-1), 0.0, atol=1e-12)


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(0.0, 1.0, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        CameraModel(1.0, 1.0, 1, 1, 4, 4, rotation=np.diag([1.0, 1.0, -1.0]))


def test_camera_dict_roundtrip_and_move(cam):
    c2 = CameraModel.from_dict(cam.to_dict())
    np.testing.assert_array_equal(c2.rotation, cam.rotation)
    moved = cam.moved((0.3, 0.0, 0.0))
    np.testing.assert_allclose(moved.center, cam.center + [0.3, 0, 0], atol=1e-15)


def test_voxel_grid_mapping(spec):
    h, w, z = np.meshgrid(np.arange(spec.H), np.arange(spec.W), np.arange(spec.Z), indexing="ij")
    p = voxel_to_world(spec, h, w, z)
    g = world_to_grid(spec, p)
    np.testing.assert_allclose(g, np.stack([h, w, z], -1), atol=1e-12)
    assert world_in_volume(spec, p).all()
    with pytest.raises(IndexError):
        voxel_to_world(spec, spec.H, 0, 0)


def test_plane_uv_drops_one_axis(spec):
    p = voxel_to_world(spec, 3, 5, 1)
    uv = world_to_plane_uv(spec, p)
    np.testing.assert_allclose(uv["hw"], [3, 5])
    np.testing.assert_allclose(uv["zh"], [1, 3])
    np.testing.assert_allclose(uv["wz"], [5, 1])


def test_containment_is_closed(spec):
    assert world_in_volume(spec, spec.lower)
    assert world_in_volume(spec, spec.upper)
    assert not world_in_volume(spec, np.array(spec.upper) + 1e-9)


def test_pillars(spec):
    pts = pillar_points(spec, 2, 3, 5)
    assert pts.shape == (5, 3)
    assert np.all(np.diff(pts[:, 2]) > 0)
    assert world_in_volume(spec, pts).all()
    for plane, (r, c, d) in PLANE_AXES.items():
        grid = plane_pillar_points(spec, plane, 3)
        assert grid.shape == (spec.dims[r], spec.dims[c], 3, 3)
        assert world_in_volume(spec, grid).all()
    with pytest.raises(ValueError):
        pillar_points(spec, 0, 0, 0)


def test_volume_spec_validation():
    with pytest.raises(ValueError):
        VolumeSpec(0, 1, 1, (0, 0, 0), (1, 1, 1))
    with pytest.raises(ValueError):
        VolumeSpec(1, 1, 1, (0, 0, 0), (1, 0, 1))


def test_look_rotation_is_rotation():
    cam = make_cam(forward=(0.3, -1.0, 0.2))
    R = cam.rotation
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
