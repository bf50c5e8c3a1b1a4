import json
import math
from dataclasses import replace

import numpy as np
import pytest

from gmmcalib.errors import ConfigError, EmptyTargetRegion
from gmmcalib.pointcloud import crop_box
from gmmcalib.scene import (
    CalibrationErrorSample,
    CubeSpec,
    SceneSpec,
    cube_points_mask,
    desk_scene,
    full_scale_scene,
    full_scene_cloud,
    make_observation_set,
    preset_scene,
    raycast_scan,
    sample_calibration_errors,
    sample_prior,
    scene_from,
)
from gmmcalib.se3 import EulerPose, inverse


@pytest.fixture
def quiet_scene():
    """Desk scene with noiseless sensors and a coarse azimuth grid."""
    scene = desk_scene()
    sensors = tuple(replace(s, noise_sigma=0.0, azimuth_step=1.0) for s in scene.sensors)
    return replace(scene, sensors=sensors)


@pytest.fixture
def error():
    return CalibrationErrorSample(EulerPose(0.01, -0.02, 0.03, 0.05, -0.08, 0.02), seed=0)


def _on_surfaces(scene, points, tol=1e-6):
    ground = np.abs(points[:, 2]) < tol
    return ground | cube_points_mask(points, scene.surfaces(), margin=tol)


def test_ray_grid_size():
    sensor = desk_scene().sensors[0]
    directions = sensor.ray_directions()
    assert len(directions) == 50 * round(360 / 0.35)
    np.testing.assert_allclose(np.linalg.norm(directions, axis=1), 1.0)
    elevations = np.degrees(np.arcsin(directions[:, 2]))
    assert elevations.min() == pytest.approx(-12.5)
    assert elevations.max() == pytest.approx(12.5)


def test_cube_contains_respects_yaw():
    cube = CubeSpec((0.0, 0.0, 0.0), 1.0, math.radians(45.0))
    corner = np.array([[0.5, 0.5, 0.0]])
    assert not cube.contains(corner)[0]
    assert cube.contains(np.array([[0.7, 0.0, 0.0]]))[0]


def test_scene_needs_two_sensors():
    scene = desk_scene()
    with pytest.raises(ConfigError):
        replace(scene, sensors=scene.sensors[:1])


def test_scene_needs_a_cube():
    with pytest.raises(ConfigError):
        replace(desk_scene(), cubes=())


def test_scene_rejects_unknown_keys():
    data = desk_scene().to_dict()
    data["lights"] = []
    with pytest.raises(ConfigError, match="lights"):
        SceneSpec.from_dict(data)


def test_sensor_needs_an_id():
    data = desk_scene().to_dict()
    del data["sensors"][0]["id"]
    with pytest.raises(ConfigError):
        SceneSpec.from_dict(data)


def test_scene_file_round_trip(tmp_path):
    scene = desk_scene()
    path = tmp_path / "scene.json"
    path.write_text(json.dumps(scene.to_dict()))
    loaded = scene_from(path)
    assert loaded.name == "desk"
    assert [s.sensor_id for s in loaded.sensors] == ["L1", "L2"]
    assert loaded.sensors[1].mounting.y == pytest.approx(-0.6)
    assert loaded.cubes[2].yaw == pytest.approx(math.radians(70.0))
    assert loaded.validation_cube.center == scene.validation_cube.center


def test_unknown_preset():
    with pytest.raises(ConfigError):
        preset_scene("garage")


def test_full_scale_scene_has_a_finer_grid():
    assert full_scale_scene().sensors[0].azimuth_step < desk_scene().sensors[0].azimuth_step


def test_target_region_reaches_below_the_ground():
    lo, hi = desk_scene().target_region()
    assert lo[2] <= -0.5
    assert np.all(lo < hi)
    for cube in desk_scene().cubes:
        assert np.all(np.asarray(cube.center) > lo)
        assert np.all(np.asarray(cube.center) < hi)


def test_noiseless_scan_hits_the_scene_surfaces(quiet_scene):
    sensor = quiet_scene.sensors[0]
    scan = raycast_scan(quiet_scene, 0)
    assert scan.sensor_id == "L1"
    vehicle = sensor.pose_in_vehicle.apply(scan.points)
    assert len(vehicle) > 0
    assert np.all(_on_surfaces(quiet_scene, vehicle))
    assert np.linalg.norm(scan.points, axis=1).max() <= sensor.max_range + 1e-9


def test_scan_noise_is_reproducible():
    scene = desk_scene()
    a = raycast_scan(scene, 1, np.random.default_rng(4))
    b = raycast_scan(scene, 1, np.random.default_rng(4))
    np.testing.assert_array_equal(a.points, b.points)


def test_calibration_errors_are_seeded_and_bounded():
    errors = sample_calibration_errors(50, seed=3, angle_bound=math.radians(3.0), translation_bound=0.1)
    again = sample_calibration_errors(50, seed=3, angle_bound=math.radians(3.0), translation_bound=0.1)
    values = np.array([e.pose.as_array() for e in errors])
    np.testing.assert_array_equal(values, np.array([e.pose.as_array() for e in again]))
    assert np.all(np.abs(values[:, :3]) <= math.radians(3.0))
    assert np.all(np.abs(values[:, 3:]) <= 0.1)
    assert [e.index for e in errors] == list(range(50))


def test_calibration_errors_need_a_count():
    with pytest.raises(ValueError):
        sample_calibration_errors(0, seed=1)


def test_observation_set_is_paired_and_cropped(quiet_scene, error):
    pairs, ground_truth = make_observation_set(quiet_scene, error, frames=2, seed=7)
    assert pairs.n_pairs == 2
    assert pairs.sensor_ids == ("L1", "L2")
    np.testing.assert_allclose(ground_truth.as_matrix(), error.transform.as_matrix())
    lo, hi = quiet_scene.target_region()
    for cloud in pairs.observations:
        assert np.all(cloud.points >= lo - 1e-9)
        assert np.all(cloud.points <= hi + 1e-9)


def test_second_sensor_carries_the_injected_error(quiet_scene, error):
    pairs, ground_truth = make_observation_set(quiet_scene, error, frames=1, seed=7)
    first, second = pairs.pair(0)
    assert np.all(_on_surfaces(quiet_scene, first.points))
    assert not np.all(_on_surfaces(quiet_scene, second.points))
    assert np.all(_on_surfaces(quiet_scene, inverse(ground_truth).apply(second.points)))


def test_empty_target_region(error):
    scene = replace(desk_scene(), crop_min=(100.0, 100.0, 100.0), crop_max=(101.0, 101.0, 101.0))
    with pytest.raises(EmptyTargetRegion):
        make_observation_set(scene, error, frames=1, seed=0)


def test_full_scene_cloud_sees_the_validation_cube(quiet_scene, error):
    cloud = full_scene_cloud(quiet_scene, error, seed=0)
    true_points = inverse(error.transform).apply(cloud.points)
    assert cube_points_mask(true_points, [quiet_scene.validation_cube]).sum() > 10
    lo, hi = quiet_scene.target_region()
    assert len(crop_box(cloud, lo, hi)) < len(cloud)


def test_prior_is_denser_than_a_scan(quiet_scene, error):
    prior = sample_prior(quiet_scene)
    pairs, _ = make_observation_set(quiet_scene, error, frames=1, seed=0)
    first, _ = pairs.pair(0)
    assert len(prior) > 4 * len(first)
    assert np.all(_on_surfaces(quiet_scene, prior.points))


def test_scene_with_a_run_echo_loads():
    data = {**desk_scene().to_dict(), "simulation": {"seed": 1, "errors": 2}}
    assert SceneSpec.from_dict(data).name == "desk"
