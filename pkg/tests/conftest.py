import math

import numpy as np
import pytest

from gmmcalib.pointcloud import ObservationSet, PointCloud
from gmmcalib.se3 import EulerPose, euler_to_transform


def box_surface(rng: np.random.Generator, center, size, count: int) -> np.ndarray:
    """Points spread uniformly over the faces of an axis-aligned box."""
    center, half = np.asarray(center, dtype=float), np.asarray(size, dtype=float) / 2
    points = rng.uniform(-1.0, 1.0, size=(count, 3))
    axis = rng.integers(0, 3, size=count)
    points[np.arange(count), axis] = rng.choice([-1.0, 1.0], size=count)
    return center + points * half


def target_scene(rng: np.random.Generator, count: int = 600) -> np.ndarray:
    """Three boxes of different shapes: no symmetry the registration could slide along."""
    return np.vstack(
        [
            box_surface(rng, (10.0, -1.6, 1.0), (0.5, 0.8, 0.5), count),
            box_surface(rng, (10.4, 0.0, 1.2), (0.6, 0.5, 1.0), count),
            box_surface(rng, (9.8, 1.6, 0.8), (0.4, 0.4, 0.7), count),
        ]
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def scene_points(rng):
    return target_scene(rng)


@pytest.fixture
def small_error():
    return euler_to_transform(EulerPose(math.radians(0.5), -math.radians(0.3), math.radians(0.8), 0.05, -0.03, 0.02))


@pytest.fixture
def paired_observations(rng, small_error):
    """Three pairs; the second sensor sees the scene displaced by ``small_error``."""
    first, second = [], []
    for j in range(3):
        points = target_scene(rng, 300) + rng.normal(0.0, 0.003, size=(900, 3))
        other = target_scene(rng, 300) + rng.normal(0.0, 0.003, size=(900, 3))
        first.append(PointCloud(points, sensor_id="L1", frame_label=f"{j}"))
        second.append(PointCloud(small_error.apply(other), sensor_id="L2", frame_label=f"{j}"))
    return ObservationSet.from_pairs(first, second)
