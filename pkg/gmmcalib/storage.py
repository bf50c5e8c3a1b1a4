import logging
import re
from pathlib import Path
from typing import Any

from gmmcalib.config import SCHEMA_VERSION, read_json
from gmmcalib.errors import ConfigError, InvalidObservationSet
from gmmcalib.pipeline import CalibrationReport
from gmmcalib.pointcloud import ObservationSet, PointCloud, read_cloud, write_cloud
from gmmcalib.scene import CalibrationErrorSample, SceneSpec
from gmmcalib.se3 import RigidTransform, transform_to_euler
from gmmcalib.utils import atomic_write_text, create_directory, dump_json, list_files, list_subdirectories

logger = logging.getLogger(__name__)

MANIFEST = "observations.json"
GROUND_TRUTH = "ground_truth.json"
FULL_CLOUD = "full_L2.ply"
PRIOR = "prior.ply"
SCENE = "scene.json"
SAMPLE_PATTERN = re.compile(r"^sample_(\d{3,})$")
REPORT_SUFFIX = "_report.json"


class RunStorage:
    """On-disk layout of a run: one ``sample_NNN`` directory per error sample.

    A sample directory holds the paired observations (``L1_JJJ.ply`` / ``L2_JJJ.ply`` and
    an ``observations.json`` manifest), the ground truth, the uncropped second-sensor scan
    and the calibration reports written for it. The run root holds the prior and the scene.
    """

    def __init__(self, base_dir: Path):
        self.base_dir = Path(base_dir)

    def sample_dir(self, sample: int) -> Path:
        return self.base_dir / f"sample_{sample:03d}"

    def list_samples(self) -> list[int]:
        """Sample numbers present under the run root, ascending."""
        samples = []
        for path in list_subdirectories(self.base_dir):
            match = SAMPLE_PATTERN.match(path.name)
            if match:
                samples.append(int(match.group(1)))
        return sorted(samples)

    def has_observations(self, sample: int) -> bool:
        return (self.sample_dir(sample) / MANIFEST).is_file()

    def save_observations(self, sample: int, observations: ObservationSet) -> Path:
        directory = self.sample_dir(sample)
        create_directory(directory)
        pairs = []
        for j in sorted(observations.pair_index):
            first, second = observations.pair(j)
            first_name, second_name = f"{first.sensor_id}_{j:03d}.ply", f"{second.sensor_id}_{j:03d}.ply"
            write_cloud(first, directory / first_name)
            write_cloud(second, directory / second_name)
            pairs.append({"pair_index": j, "first": first_name, "second": second_name})
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "sensor_ids": list(observations.sensor_ids),
            "pairs": pairs,
        }
        return atomic_write_text(directory / MANIFEST, dump_json(manifest))

    def load_observations(self, sample: int) -> ObservationSet:
        """Rebuild the paired observation set from a sample directory.

        Raises:
            ConfigError: If the manifest is missing or unreadable
            InvalidObservationSet: If the manifest does not describe a valid pairing
        """
        directory = self.sample_dir(sample)
        manifest = read_json(directory / MANIFEST)
        try:
            entries = sorted(manifest["pairs"], key=lambda p: p["pair_index"])
            first = [read_cloud(directory / p["first"]) for p in entries]
            second = [read_cloud(directory / p["second"]) for p in entries]
        except (KeyError, TypeError) as e:
            msg = f"{directory / MANIFEST}: malformed manifest ({e})"
            raise InvalidObservationSet(msg) from e
        return ObservationSet.from_pairs(first, second)

    def save_ground_truth(self, sample: int, ground_truth: RigidTransform, error: CalibrationErrorSample) -> Path:
        data = {
            "schema_version": SCHEMA_VERSION,
            "matrix": ground_truth.as_matrix().tolist(),
            "euler": transform_to_euler(ground_truth).to_dict(),
            "error_sample": error.to_dict(),
        }
        return atomic_write_text(self.sample_dir(sample) / GROUND_TRUTH, dump_json(data))

    def load_ground_truth(self, sample: int) -> RigidTransform:
        path = self.sample_dir(sample) / GROUND_TRUTH
        data = read_json(path)
        try:
            return RigidTransform.from_matrix(data["matrix"])
        except (KeyError, TypeError, ValueError) as e:
            msg = f"{path}: malformed ground truth ({e})"
            raise ConfigError(msg) from e

    def save_full_cloud(self, sample: int, cloud: PointCloud) -> Path:
        return write_cloud(cloud, self.sample_dir(sample) / FULL_CLOUD)

    def load_full_cloud(self, sample: int) -> PointCloud | None:
        path = self.sample_dir(sample) / FULL_CLOUD
        return read_cloud(path) if path.is_file() else None

    def save_prior(self, prior: PointCloud) -> Path:
        return write_cloud(prior, self.base_dir / PRIOR)

    def load_prior(self) -> PointCloud | None:
        path = self.base_dir / PRIOR
        return read_cloud(path) if path.is_file() else None

    def save_scene(self, scene: SceneSpec, extra: dict[str, Any] | None = None) -> Path:
        return atomic_write_text(self.base_dir / SCENE, dump_json({**scene.to_dict(), **(extra or {})}))

    def save_report(self, sample: int, report: CalibrationReport) -> Path:
        path = self.sample_dir(sample) / f"{report.algorithm}{REPORT_SUFFIX}"
        atomic_write_text(path, dump_json(report.to_dict()))
        logger.debug(f"Report saved: {path}")
        return path

    def load_report(self, sample: int, algorithm: str) -> CalibrationReport:
        path = self.sample_dir(sample) / f"{algorithm}{REPORT_SUFFIX}"
        data = read_json(path)
        try:
            return CalibrationReport.from_dict(data)
        except (KeyError, TypeError, ValueError) as e:
            msg = f"{path}: malformed report ({e})"
            raise ConfigError(msg) from e

    def list_reports(self, sample: int) -> list[str]:
        """Algorithms with a report in the given sample directory."""
        reports = list_files(self.sample_dir(sample), "json")
        return [p.name.removesuffix(REPORT_SUFFIX) for p in reports if p.name.endswith(REPORT_SUFFIX)]
