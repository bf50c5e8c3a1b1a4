import numpy as np
import pytest

from gmmcalib.errors import EmptyCloud, InvalidObservationSet, ParseError, TooFewPoints, UnsupportedFormat
from gmmcalib.pointcloud import (
    ObservationSet,
    PointCloud,
    SpatialIndex,
    concatenate,
    crop_box,
    estimate_normals,
    read_cloud,
    write_cloud,
)
from gmmcalib.se3 import EulerPose, euler_to_transform


def test_point_cloud_rejects_non_finite_points():
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, np.nan, 1.0]]))


def test_point_cloud_rejects_non_unit_normals():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((1, 3)), normals=np.array([[0.0, 0.0, 2.0]]))


def test_transformed_rotates_normals():
    cloud = PointCloud(np.array([[1.0, 0.0, 0.0]]), normals=np.array([[1.0, 0.0, 0.0]]), sensor_id="L1")
    moved = cloud.transformed(euler_to_transform(EulerPose(yaw=np.pi / 2, z=1.0)))
    np.testing.assert_allclose(moved.points, [[0.0, 1.0, 1.0]], atol=1e-12)
    np.testing.assert_allclose(moved.normals, [[0.0, 1.0, 0.0]], atol=1e-12)
    assert moved.sensor_id == "L1"


def test_empty_cloud_has_no_bounds():
    with pytest.raises(EmptyCloud):
        PointCloud(np.zeros((0, 3))).bounds()


def _clouds(sensor, n):
    return [PointCloud(np.zeros((1, 3)), sensor_id=sensor, frame_label=str(j)) for j in range(n)]


def test_observation_set_pairs_by_position():
    pairs = ObservationSet.from_pairs(_clouds("L1", 3), _clouds("L2", 3))
    assert pairs.n_pairs == 3
    assert len(pairs) == 6
    assert pairs.sensor_ids == ("L1", "L2")
    first, second = pairs.pair(2)
    assert (first.sensor_id, second.sensor_id) == ("L1", "L2")
    assert first.frame_label == second.frame_label == "2"


def test_observation_set_rejects_unequal_counts():
    with pytest.raises(InvalidObservationSet):
        ObservationSet.from_pairs(_clouds("L1", 3), _clouds("L2", 2))


def test_observation_set_rejects_a_third_sensor():
    with pytest.raises(InvalidObservationSet):
        ObservationSet((*_clouds("L1", 1), *_clouds("L2", 1), *_clouds("L3", 1)), {0: (0, 1)})


def test_observation_set_rejects_crossed_pairs():
    clouds = (*_clouds("L1", 2), *_clouds("L2", 2))
    with pytest.raises(InvalidObservationSet):
        ObservationSet(clouds, {0: (0, 1), 1: (2, 3)})


def test_spatial_index_matches_brute_force(rng):
    points = rng.uniform(-5, 5, size=(500, 3))
    queries = rng.uniform(-5, 5, size=(50, 3))
    distances, indices = SpatialIndex(points).query(queries)
    brute = np.linalg.norm(queries[:, None, :] - points[None, :, :], axis=2)
    np.testing.assert_array_equal(indices, brute.argmin(axis=1))
    np.testing.assert_allclose(distances, brute.min(axis=1))


def test_spatial_index_rejects_empty_cloud():
    with pytest.raises(EmptyCloud):
        SpatialIndex(np.zeros((0, 3)))


def test_normals_of_a_plane_face_the_origin(rng):
    xy = rng.uniform(-1, 1, size=(200, 2))
    plane = PointCloud(np.column_stack([xy, np.full(200, 2.0)]))
    normals = estimate_normals(plane, k=10).normals
    np.testing.assert_allclose(normals, np.tile([0.0, 0.0, -1.0], (200, 1)), atol=1e-9)


def test_normals_need_enough_points():
    with pytest.raises(TooFewPoints):
        estimate_normals(PointCloud(np.zeros((5, 3))), k=10)


def test_crop_box_keeps_closed_interior():
    cloud = PointCloud(np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 0.0, 0.0]]))
    kept = crop_box(cloud, (0, 0, 0), (1, 1, 1))
    assert len(kept) == 2
    assert len(crop_box(cloud, (0, 0, 0), (1, 1, 1), invert=True)) == 1


def test_crop_box_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        crop_box(PointCloud(np.zeros((1, 3))), (1, 0, 0), (0, 1, 1))


def test_concatenate_stacks_in_order():
    a = PointCloud(np.zeros((2, 3)))
    b = PointCloud(np.ones((3, 3)))
    merged = concatenate([a, b], sensor_id="L1")
    assert len(merged) == 5
    np.testing.assert_array_equal(merged.points[2:], np.ones((3, 3)))


@pytest.mark.parametrize("suffix", [".ply", ".pcd", ".csv"])
def test_write_then_read_keeps_points_and_labels(tmp_path, rng, suffix):
    cloud = estimate_normals(PointCloud(rng.uniform(-3, 3, size=(40, 3)), sensor_id="L2", frame_label="7"), k=5)
    path = write_cloud(cloud, tmp_path / f"cloud{suffix}")
    loaded = read_cloud(path)
    np.testing.assert_allclose(loaded.points, cloud.points, rtol=1e-8, atol=1e-9)
    np.testing.assert_allclose(loaded.normals, cloud.normals, rtol=1e-7, atol=1e-8)
    assert (loaded.sensor_id, loaded.frame_label) == ("L2", "7")


def test_read_ply_reports_the_bad_line(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
        "property float z\nend_header\n0 0 0\n1 oops 2\n"
    )
    with pytest.raises(ParseError) as excinfo:
        read_cloud(path)
    assert excinfo.value.line == 9


def test_read_ply_rejects_binary(tmp_path):
    path = tmp_path / "binary.ply"
    path.write_text("ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(UnsupportedFormat):
        read_cloud(path)


def test_read_ply_with_missing_vertices(tmp_path):
    path = tmp_path / "short.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\n"
        "end_header\n0 0 0\n"
    )
    with pytest.raises(ParseError):
        read_cloud(path)


def test_unknown_suffix_is_unsupported(tmp_path):
    with pytest.raises(UnsupportedFormat):
        write_cloud(PointCloud(np.zeros((1, 3))), tmp_path / "cloud.las")


@pytest.mark.parametrize("token", ["nan", "inf", "-Infinity"])
def test_read_cloud_rejects_non_finite_coordinates(tmp_path, token):
    path = tmp_path / "cloud.csv"
    path.write_text(f"x,y,z\n0,0,0\n1,{token},2\n")
    with pytest.raises(ParseError, match="non-finite") as excinfo:
        read_cloud(path)
    assert excinfo.value.line == 3


def test_read_cloud_reports_undecodable_bytes_with_their_line(tmp_path):
    path = tmp_path / "cloud.pcd"
    path.write_bytes(b"VERSION 0.7\nFIELDS x y z\nPOINTS 1\nDATA ascii\n0 \xff 0\n")
    with pytest.raises(ParseError) as excinfo:
        read_cloud(path)
    assert excinfo.value.line == 5


def test_read_cloud_rejects_binary_payloads(tmp_path):
    path = tmp_path / "binary.pcd"
    path.write_bytes(b"VERSION 0.7\nFIELDS x y z\nPOINTS 1\nDATA binary\n\x00\x00\x80\xbf\xff\xfe\x00\x00")
    with pytest.raises(UnsupportedFormat, match="DATA binary"):
        read_cloud(path)
