"""Synthetic two-LiDAR scenes: cubic targets above a flat ground, sampled by a beam model.

Scans are produced in each sensor's own frame, moved into the vehicle frame with the
nominal mounting poses, and the second sensor's clouds are perturbed by an injected
calibration error. That error is the ground truth every algorithm is scored against.
"""

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from gmmcalib.config import SCHEMA_VERSION, check_keys, read_json
from gmmcalib.errors import ConfigError, EmptyTargetRegion
from gmmcalib.pointcloud import ObservationSet, PointCloud, concatenate, crop_box
from gmmcalib.se3 import EulerPose, RigidTransform, compose, euler_to_transform, rot_z

logger = logging.getLogger(__name__)

DEFAULT_ANGLE_BOUND = math.radians(3.0)
DEFAULT_TRANSLATION_BOUND = 0.1
TARGET_MARGIN = 0.5
PRIOR_DENSITY = 4
PRESET_FRAMES = {"desk": 20, "full": 106}


@dataclass(frozen=True)
class CubeSpec:
    center: tuple[float, float, float]
    edge: float
    yaw: float = 0.0

    def __post_init__(self):
        if self.edge <= 0:
            msg = f"Cube edge must be positive, got {self.edge}"
            raise ConfigError(msg)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def half_extent(self) -> np.ndarray:
        """Half size of the cube's axis-aligned bounding box."""
        h = self.edge / 2
        planar = h * (abs(math.cos(self.yaw)) + abs(math.sin(self.yaw)))
        return np.array([planar, planar, h])

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        local = (np.asarray(points) - np.asarray(self.center)) @ rot_z(self.yaw)
        return np.all(np.abs(local) <= self.edge / 2 + margin, axis=1)

    def to_dict(self) -> dict[str, Any]:
        return {"center": list(self.center), "edge": self.edge, "yaw_deg": math.degrees(self.yaw)}

    @classmethod
    def from_dict(cls, data: Any, where: str) -> "CubeSpec":
        values = check_keys(data, {"center", "edge", "yaw_deg"}, where)
        try:
            return cls(tuple(values["center"]), float(values["edge"]), math.radians(float(values.get("yaw_deg", 0.0))))
        except (KeyError, TypeError, ValueError) as e:
            msg = f"{where}: {e}"
            raise ConfigError(msg) from e


@dataclass(frozen=True)
class GroundSpec:
    enabled: bool = True
    extent: float = 30.0


@dataclass(frozen=True)
class SensorSpec:
    """Rotating LiDAR beam model. Angles in degrees, distances in meters."""

    sensor_id: str
    mounting: EulerPose
    h_fov: float = 360.0
    v_fov: float = 25.0
    channels: int = 50
    max_range: float = 50.0
    azimuth_step: float = 0.35
    noise_sigma: float = 0.01

    def __post_init__(self):
        if self.channels < 1 or self.max_range <= 0 or self.noise_sigma < 0 or self.azimuth_step <= 0:
            msg = f"Sensor {self.sensor_id!r}: need channels >= 1, range > 0, azimuth_step > 0, noise_sigma >= 0"
            raise ConfigError(msg)

    @property
    def pose_in_vehicle(self) -> RigidTransform:
        return euler_to_transform(self.mounting)

    def ray_directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, one per (channel, azimuth)."""
        if self.channels == 1:
            elevations = np.zeros(1)
        else:
            elevations = np.radians(np.linspace(-self.v_fov / 2, self.v_fov / 2, self.channels))
        columns = max(1, round(self.h_fov / self.azimuth_step))
        azimuths = np.radians(-self.h_fov / 2 + self.azimuth_step * np.arange(columns))
        el, az = np.meshgrid(elevations, azimuths, indexing="ij")
        return np.column_stack([
            (np.cos(el) * np.cos(az)).ravel(),
            (np.cos(el) * np.sin(az)).ravel(),
            np.sin(el).ravel(),
        ])

    def to_dict(self) -> dict[str, Any]:
        pose = self.mounting
        return {
            "id": self.sensor_id,
            "pose": {
                "x": pose.x,
                "y": pose.y,
                "z": pose.z,
                "roll_deg": math.degrees(pose.roll),
                "pitch_deg": math.degrees(pose.pitch),
                "yaw_deg": math.degrees(pose.yaw),
            },
            "h_fov": self.h_fov,
            "v_fov": self.v_fov,
            "channels": self.channels,
            "max_range": self.max_range,
            "azimuth_step": self.azimuth_step,
            "noise_sigma": self.noise_sigma,
        }

    @classmethod
    def from_dict(cls, data: Any, where: str) -> "SensorSpec":
        allowed = {"id", "pose", "h_fov", "v_fov", "channels", "max_range", "azimuth_step", "noise_sigma"}
        values = dict(check_keys(data, allowed, where))
        pose = check_keys(values.pop("pose", {}), {"x", "y", "z", "roll_deg", "pitch_deg", "yaw_deg"}, f"{where}.pose")
        if "id" not in values:
            msg = f"{where}: sensor 'id' is required"
            raise ConfigError(msg)
        mounting = EulerPose(
            math.radians(float(pose.get("roll_deg", 0.0))),
            math.radians(float(pose.get("pitch_deg", 0.0))),
            math.radians(float(pose.get("yaw_deg", 0.0))),
            float(pose.get("x", 0.0)),
            float(pose.get("y", 0.0)),
            float(pose.get("z", 0.0)),
        )
        try:
            return cls(str(values.pop("id")), mounting, **values)
        except TypeError as e:
            msg = f"{where}: {e}"
            raise ConfigError(msg) from e


@dataclass(frozen=True)
class SceneSpec:
    cubes: tuple[CubeSpec, ...]
    sensors: tuple[SensorSpec, ...]
    ground: GroundSpec = field(default_factory=GroundSpec)
    validation_cube: CubeSpec | None = None
    crop_min: tuple[float, float, float] | None = None
    crop_max: tuple[float, float, float] | None = None
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "cubes", tuple(self.cubes))
        object.__setattr__(self, "sensors", tuple(self.sensors))
        if len(self.sensors) < 2:
            msg = f"A scene needs at least one sensor pair, got {len(self.sensors)} sensor(s)"
            raise ConfigError(msg)
        if not self.cubes:
            msg = "A scene needs at least one target cube"
            raise ConfigError(msg)
        if (self.crop_min is None) != (self.crop_max is None):
            msg = "crop_box needs both min and max"
            raise ConfigError(msg)

    def target_region(self) -> tuple[np.ndarray, np.ndarray]:
        """Crop box around the target cubes: their bounds plus a margin, reaching below the ground."""
        if self.crop_min is not None:
            return np.asarray(self.crop_min, dtype=float), np.asarray(self.crop_max, dtype=float)
        lo = np.min([np.asarray(c.center) - c.half_extent() for c in self.cubes], axis=0) - TARGET_MARGIN
        hi = np.max([np.asarray(c.center) + c.half_extent() for c in self.cubes], axis=0) + TARGET_MARGIN
        lo[2] = min(lo[2], -TARGET_MARGIN)
        return lo, hi

    def surfaces(self) -> tuple[CubeSpec, ...]:
        return self.cubes if self.validation_cube is None else (*self.cubes, self.validation_cube)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "cubes": [c.to_dict() for c in self.cubes],
            "ground": {"enabled": self.ground.enabled, "extent": self.ground.extent},
            "sensors": [s.to_dict() for s in self.sensors],
        }
        if self.validation_cube is not None:
            out["validation_cube"] = self.validation_cube.to_dict()
        if self.crop_min is not None:
            out["crop_box"] = {"min": list(self.crop_min), "max": list(self.crop_max)}
        return out

    @classmethod
    def from_dict(cls, data: Any, where: str = "scene") -> "SceneSpec":
        # "simulation" is the run echo written next to simulated samples; it is not part of the scene.
        allowed = {"schema_version", "name", "cubes", "ground", "sensors", "validation_cube", "crop_box", "simulation"}
        values = check_keys(data, allowed, where)
        if values.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            msg = f"{where}: schema_version {values['schema_version']} is not supported"
            raise ConfigError(msg)
        ground = check_keys(values.get("ground", {}), {"enabled", "extent"}, f"{where}.ground")
        crop_min = crop_max = None
        if "crop_box" in values:
            crop = check_keys(values["crop_box"], {"min", "max"}, f"{where}.crop_box")
            crop_min, crop_max = tuple(crop["min"]), tuple(crop["max"])
        validation = values.get("validation_cube")
        return cls(
            cubes=tuple(CubeSpec.from_dict(c, f"{where}.cubes[{i}]") for i, c in enumerate(values.get("cubes", []))),
            sensors=tuple(
                SensorSpec.from_dict(s, f"{where}.sensors[{i}]") for i, s in enumerate(values.get("sensors", []))
            ),
            ground=GroundSpec(bool(ground.get("enabled", True)), float(ground.get("extent", 30.0))),
            validation_cube=CubeSpec.from_dict(validation, f"{where}.validation_cube") if validation else None,
            crop_min=crop_min,
            crop_max=crop_max,
            name=str(values.get("name", "custom")),
        )


@dataclass(frozen=True)
class CalibrationErrorSample:
    """Error injected into the second sensor's clouds (radians, meters)."""

    pose: EulerPose
    seed: int
    index: int = 0

    @property
    def transform(self) -> RigidTransform:
        return euler_to_transform(self.pose)

    def to_dict(self) -> dict[str, Any]:
        return {"index": self.index, "seed": self.seed, **self.pose.to_dict()}


def load_scene(path: Path) -> SceneSpec:
    return SceneSpec.from_dict(read_json(path), where=str(path))


def _cube_hits(origin: np.ndarray, directions: np.ndarray, cube: CubeSpec) -> np.ndarray:
    """Ray parameter of the first hit on a yawed cube (slab method), inf on a miss."""
    rotation = rot_z(cube.yaw)
    local_origin = (origin - np.asarray(cube.center)) @ rotation
    local_dirs = directions @ rotation
    half = cube.edge / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - local_origin) / local_dirs
        t2 = (half - local_origin) / local_dirs
    t_near = np.fmin(t1, t2).max(axis=1)
    t_far = np.fmax(t1, t2).min(axis=1)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def _ground_hits(origin: np.ndarray, directions: np.ndarray, ground: GroundSpec) -> np.ndarray:
    t = np.full(len(directions), np.inf)
    if not ground.enabled or origin[2] <= 0:
        return t
    down = directions[:, 2] < 0
    t[down] = -origin[2] / directions[down, 2]
    hits = origin + t[:, None] * directions
    outside = np.any(np.abs(hits[:, :2]) > ground.extent, axis=1)
    t[down & outside] = np.inf
    return t


def raycast_scan(
    scene: SceneSpec, sensor_index: int, rng: np.random.Generator | None = None, *, with_validation: bool = True
) -> PointCloud:
    """One scan of ``scene`` by sensor ``sensor_index``, in that sensor's frame.

    The nearest hit along every ray (cube faces or ground) within range is kept; Gaussian
    range noise is added along the ray.
    """
    sensor = scene.sensors[sensor_index]
    pose = sensor.pose_in_vehicle
    local_dirs = sensor.ray_directions()
    directions = pose.rotate(local_dirs)
    origin = pose.translation

    cubes = scene.surfaces() if with_validation else scene.cubes
    candidates = [_ground_hits(origin, directions, scene.ground)]
    candidates.extend(_cube_hits(origin, directions, c) for c in cubes)
    t = np.min(np.vstack(candidates), axis=0)
    valid = t <= sensor.max_range

    ranges = t[valid]
    if sensor.noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        ranges = ranges + rng.normal(0.0, sensor.noise_sigma, size=len(ranges))
    points = local_dirs[valid] * ranges[:, None]
    return PointCloud(points, sensor_id=sensor.sensor_id, frame_label=sensor.sensor_id)


def sample_calibration_errors(
    n: int,
    seed: int,
    angle_bound: float = DEFAULT_ANGLE_BOUND,
    translation_bound: float = DEFAULT_TRANSLATION_BOUND,
) -> list[CalibrationErrorSample]:
    """Draw ``n`` errors uniformly within ±angle_bound (rad) and ±translation_bound (m) per component."""
    if n < 1:
        msg = f"Need at least one error sample, got {n}"
        raise ValueError(msg)
    rng = np.random.default_rng(seed)
    bounds = np.array([angle_bound] * 3 + [translation_bound] * 3)
    values = rng.uniform(-bounds, bounds, size=(n, 6))
    return [CalibrationErrorSample(EulerPose.from_array(v), seed, k) for k, v in enumerate(values)]


def _vehicle_scan(
    scene: SceneSpec, sensor_index: int, error: RigidTransform | None, seed: int, frame: int, *, with_validation: bool
) -> PointCloud:
    rng = np.random.default_rng([seed, frame, sensor_index])
    scan = raycast_scan(scene, sensor_index, rng, with_validation=with_validation)
    placed = scene.sensors[sensor_index].pose_in_vehicle
    if error is not None:
        placed = compose(error, placed)
    return scan.transformed(placed, frame_label="vehicle")


def make_observation_set(
    scene: SceneSpec, error: CalibrationErrorSample, frames: int, seed: int
) -> tuple[ObservationSet, RigidTransform]:
    """Paired, target-cropped vehicle-frame observations of the first two sensors.

    Returns the observation set and the ground-truth map from first-sensor to
    second-sensor coordinates, which is the injected error itself.

    Raises:
        EmptyTargetRegion: If a cropped observation holds no points
    """
    if frames < 1:
        msg = f"Need at least one frame per sensor, got {frames}"
        raise ValueError(msg)
    ground_truth = error.transform
    lo, hi = scene.target_region()
    per_sensor: list[list[PointCloud]] = [[], []]
    for frame in range(frames):
        for s, injected in ((0, None), (1, ground_truth)):
            cloud = crop_box(_vehicle_scan(scene, s, injected, seed, frame, with_validation=False), lo, hi)
            if cloud.is_empty:
                msg = f"Sensor {scene.sensors[s].sensor_id!r} frame {frame}: no points inside the target region"
                raise EmptyTargetRegion(msg)
            per_sensor[s].append(cloud)
    observations = ObservationSet.from_pairs(per_sensor[0], per_sensor[1])
    sizes = [len(c) for c in observations.observations]
    logger.debug(f"Simulated {frames} frames per sensor, {min(sizes)}-{max(sizes)} points per observation")
    return observations, ground_truth


def full_scene_cloud(scene: SceneSpec, error: CalibrationErrorSample, seed: int) -> PointCloud:
    """Uncropped first-frame scan of the second sensor, with the error applied."""
    return _vehicle_scan(scene, 1, error.transform, seed, 0, with_validation=True)


def sample_prior(scene: SceneSpec, density: int = PRIOR_DENSITY) -> PointCloud:
    """Dense noiseless sampling of the target region as seen from every sensor."""
    lo, hi = scene.target_region()
    clouds = []
    for i, sensor in enumerate(scene.sensors):
        dense = replace(
            sensor,
            noise_sigma=0.0,
            azimuth_step=sensor.azimuth_step / density,
            channels=(sensor.channels - 1) * density + 1,
        )
        dense_scene = replace(scene, sensors=tuple(dense if j == i else s for j, s in enumerate(scene.sensors)))
        scan = raycast_scan(dense_scene, i, with_validation=False)
        clouds.append(crop_box(scan.transformed(sensor.pose_in_vehicle, "vehicle"), lo, hi))
    return concatenate(clouds, sensor_id="prior", frame_label="vehicle")


def _sensor_pair(channels: int, v_fov: float, max_range: float, azimuth_step: float) -> tuple[SensorSpec, SensorSpec]:
    return tuple(
        SensorSpec(
            sensor_id,
            EulerPose(0.0, 0.0, 0.0, 1.5, y, 1.9),
            v_fov=v_fov,
            channels=channels,
            max_range=max_range,
            azimuth_step=azimuth_step,
        )
        for sensor_id, y in (("L1", 0.6), ("L2", -0.6))
    )


def _target_cubes() -> tuple[CubeSpec, ...]:
    return (
        CubeSpec((10.0, -1.6, 1.0), 0.5, math.radians(15.0)),
        CubeSpec((10.4, 0.0, 1.2), 0.5, math.radians(40.0)),
        CubeSpec((9.8, 1.6, 0.8), 0.5, math.radians(70.0)),
    )


def desk_scene() -> SceneSpec:
    """Three cubes at about 10 m in front of two roof LiDARs, sized for quick runs."""
    return SceneSpec(
        cubes=_target_cubes(),
        sensors=_sensor_pair(channels=50, v_fov=25.0, max_range=50.0, azimuth_step=0.35),
        validation_cube=CubeSpec((16.0, 0.5, 1.0), 0.5, math.radians(30.0)),
        name="desk",
    )


def full_scale_scene() -> SceneSpec:
    """Same layout with a finer azimuth grid, giving roughly 1850 points per observation."""
    return replace(desk_scene(), sensors=_sensor_pair(50, 25.0, 50.0, 0.1), name="full")


PRESETS = {"desk": desk_scene, "full": full_scale_scene}


def preset_scene(name: str) -> SceneSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        msg = f"Unknown scene preset {name!r}; choose from {sorted(PRESETS)}"
        raise ConfigError(msg) from None


def scene_from(path: Path | None, preset: str = "desk") -> SceneSpec:
    return load_scene(path) if path is not None else preset_scene(preset)


def cube_points_mask(points: np.ndarray, cubes: Sequence[CubeSpec], margin: float = 0.05) -> np.ndarray:
    mask = np.zeros(len(points), dtype=bool)
    for cube in cubes:
        mask |= cube.contains(points, margin)
    return mask


def error_bounds_dict(angle_bound: float, translation_bound: float) -> Mapping[str, float]:
    return {"angle_bound_deg": math.degrees(angle_bound), "translation_bound": translation_bound}
