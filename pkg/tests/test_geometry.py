import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headsplat.geometry import (
    CameraPose, InvalidRigError, Ray, Rig, camera_to_world, dataset_rig, load_cameras,
    orbit_band, pixel_ray, pixel_rays, plucker_embed, plucker_map, project_point, rig_poses,
    save_cameras, view_matrix,
)

elevations = st.floats(-89.0, 89.0)
azimuths = st.floats(-720.0, 720.0)


def test_dataset_rig_has_96_distinct_poses():
    poses = rig_poses(dataset_rig())
    assert len(poses) == 96
    assert len({(p.elevation, p.azimuth) for p in poses}) == 96
    # elevation-major, azimuth ascending
    assert [p.elevation for p in poses[:16]] == [-10.0] * 16
    assert [p.azimuth for p in poses[:3]] == [0.0, 22.5, 45.0]


def test_degenerate_rigs():
    assert [(p.elevation, p.azimuth) for p in rig_poses(Rig([0.0], 1))] == [(0.0, 0.0)]
    assert [p.azimuth for p in rig_poses(Rig([0.0], 4))] == [0.0, 90.0, 180.0, 270.0]
    with pytest.raises(InvalidRigError):
        Rig([], 16)
    with pytest.raises(InvalidRigError):
        Rig([0.0], 0)


def test_orbit_band():
    ring = orbit_band(0.0, 16, 2.5)
    assert len(ring) == 16
    assert np.allclose(np.diff([p.azimuth for p in ring]), 22.5)
    assert [p.azimuth for p in orbit_band(0.0, 4)] == [0.0, 90.0, 180.0, 270.0]
    with pytest.raises(ValueError):
        orbit_band(0.0, 0)


def test_pole_origins_coincide_and_differ_by_roll():
    poses = orbit_band(90.0, 3, 2.0, width=9, height=9)
    origins = np.array([p.position for p in poses])
    assert np.allclose(origins, origins[0])
    centres = [pixel_ray(p, 4, 4).direction for p in poses]
    assert np.allclose(centres, [0.0, -1.0, 0.0])


def test_pose_validation_and_normalisation():
    assert CameraPose(0.0, -90.0).azimuth == 270.0
    assert CameraPose(0.0, 720.0).azimuth == 0.0
    for kw in ({"elevation": 91.0}, {"radius": 0.0}, {"fov_y": 180.0}, {"width": 0}):
        args = {"elevation": 0.0, "azimuth": 0.0, **kw}
        with pytest.raises(ValueError):
            CameraPose(**args)


def test_frontal_and_posterior_camera_positions():
    W, K = view_matrix(CameraPose(0.0, 0.0, 3.0))
    assert np.allclose(np.linalg.inv(W)[:3, 3], [0.0, 0.0, 3.0])
    assert np.allclose(W @ [0, 0, 0, 1], [0.0, 0.0, -3.0, 1.0])
    assert np.allclose(CameraPose(0.0, 180.0, 3.0).position, [0.0, 0.0, -3.0], atol=1e-12)
    assert np.allclose(CameraPose(0.0, 90.0, 3.0).position, [3.0, 0.0, 0.0], atol=1e-12)


def test_projection_convention():
    pose = CameraPose(0.0, 0.0, 2.5, 40.0, 64, 64)
    uv, depth = project_point(pose, [0.0, 0.0, 0.0])
    assert np.allclose(uv, [32.0, 32.0]) and depth == pytest.approx(2.5)
    # +y is up (smaller v), +x is to the right for the frontal camera
    assert project_point(pose, [0.0, 0.3, 0.0])[0][1] < 32.0
    assert project_point(pose, [0.3, 0.0, 0.0])[0][0] > 32.0


@settings(max_examples=60, deadline=None)
@given(elevations, azimuths, st.floats(0.5, 10.0), st.floats(5.0, 150.0))
def test_view_matrix_inverse_and_look_at(e, a, r, fov):
    pose = CameraPose(e, a, r, fov, 33, 21)
    W, K = view_matrix(pose)
    assert np.allclose(W @ camera_to_world(pose), np.eye(4), atol=1e-10)
    uv, depth = project_point(pose, np.zeros(3))
    assert np.allclose(uv, [K.cx, K.cy], atol=1e-9)
    assert depth == pytest.approx(r)


@settings(max_examples=40, deadline=None)
@given(elevations, azimuths)
def test_centre_pixel_ray_points_at_origin(e, a):
    # odd size so a pixel centre sits exactly on the optical axis
    pose = CameraPose(e, a, 2.5, 40.0, 15, 11)
    ray = pixel_ray(pose, 7, 5)
    assert np.allclose(ray.direction, -ray.origin / np.linalg.norm(ray.origin), atol=1e-12)


def test_pixel_ray_bounds():
    pose = CameraPose(0.0, 0.0, width=8, height=6)
    with pytest.raises(IndexError):
        pixel_ray(pose, 8, 0)
    with pytest.raises(IndexError):
        pixel_ray(pose, 0, -1)


def test_rays_reproject_to_their_pixel():
    pose = CameraPose(20.0, 130.0, 2.5, 40.0, 12, 10)
    o, d = pixel_rays(pose)
    for py, px in [(0, 0), (3, 7), (9, 11)]:
        uv, _ = project_point(pose, o[py, px] + 1.7 * d[py, px])
        assert np.allclose(uv, [px + 0.5, py + 0.5], atol=1e-9)


def test_plucker_examples():
    assert np.allclose(plucker_embed(Ray.from_origin_direction([0, 0, 0], [0, 0, -1])),
                       [0, 0, 0, 0, 0, -1])
    assert np.allclose(plucker_embed(Ray.from_origin_direction([1, 0, 0], [0, 1, 0])),
                       [0, 0, 1, 0, 1, 0])
    r = Ray.from_origin_direction([0.3, -1.0, 2.0], [0.0, 0.6, 0.8])
    flipped = Ray.from_origin_direction(r.origin, -r.direction)
    assert np.allclose(plucker_embed(flipped)[:3], -plucker_embed(r)[:3])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3),
       st.sampled_from([-3.0, 0.5, 7.0]) | st.floats(-10, 10))
def test_plucker_slide_invariance(o, d, s):
    ray = Ray.from_origin_direction(o, d)
    slid = Ray.from_origin_direction(ray.origin + s * ray.direction, ray.direction)
    direct = np.cross(ray.origin + s * ray.direction, ray.direction)
    assert np.allclose(plucker_embed(slid)[:3], plucker_embed(ray)[:3], atol=1e-12 * (1 + abs(s)) * 10)
    assert np.allclose(slid.moment, direct, atol=1e-12)


def test_plucker_map_constraint():
    pm = plucker_map(CameraPose(30.0, 200.0, 2.5, 40.0, 16, 12))
    m, d = pm[..., :3], pm[..., 3:]
    assert np.max(np.abs(np.sum(m * d, axis=-1))) < 1e-12
    assert np.max(np.abs(np.linalg.norm(d, axis=-1) - 1.0)) < 1e-9


def test_camera_json_roundtrip(tmp_path):
    poses = rig_poses(dataset_rig(width=40, height=30)) + [CameraPose(12.345678, 3.21, 2.2, 33.3, 7, 5)]
    save_cameras(poses, tmp_path / "cams.json")
    back = load_cameras(tmp_path / "cams.json")
    assert len(back) == len(poses)
    for a, b in zip(poses, back):
        assert abs(a.elevation - b.elevation) < 1e-6 and abs(a.azimuth - b.azimuth) < 1e-6
        assert (a.width, a.height) == (b.width, b.height)
        assert abs(a.radius - b.radius) < 1e-6 and abs(a.fov_y - b.fov_y) < 1e-6


def test_camera_json_rejects_foreign_convention(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"convention": "opencv", "poses": []}')
    with pytest.raises(ValueError):
        load_cameras(p)
