"""Run-level workflows: simulate a robustness study, calibrate every sample, evaluate."""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from gmmcalib.config import ALGORITHMS, EvaluationConfig, PipelineConfig
from gmmcalib.errors import CalibrationError, ConfigError, EmptyTargetRegion, MisalignedBookkeeping, RegistrationError
from gmmcalib.evaluation import (
    MetricsTable,
    build_metrics_table,
    export_metrics,
    global_range_profile,
    merge_tables,
    pooled_range_profile,
    profile_csv,
    profile_points_csv,
    validation_cube_error,
)
from gmmcalib.perf import timer
from gmmcalib.pipeline import CalibrationReport, crop_observations, run_algorithm
from gmmcalib.pointcloud import PointCloud, read_cloud
from gmmcalib.report import write_summary
from gmmcalib.scene import (
    DEFAULT_ANGLE_BOUND,
    DEFAULT_TRANSLATION_BOUND,
    SceneSpec,
    cube_points_mask,
    error_bounds_dict,
    full_scene_cloud,
    load_scene,
    make_observation_set,
    sample_calibration_errors,
    sample_prior,
)
from gmmcalib.se3 import RigidTransform, inverse
from gmmcalib.storage import MANIFEST, SAMPLE_PATTERN, SCENE, RunStorage
from gmmcalib.utils import atomic_write_text, create_directory

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlgorithmFailure:
    """One algorithm run that produced no report for a sample."""

    sample: int
    algorithm: str
    error: str
    message: str
    registration: bool

    @classmethod
    def from_error(cls, sample: int, algorithm: str, error: CalibrationError) -> "AlgorithmFailure":
        return cls(sample, algorithm, type(error).__name__, str(error), isinstance(error, RegistrationError))


@dataclass
class CalibrationOutcome:
    """What ``calibrate_run`` produced: report counts and the algorithm runs that failed outright."""

    reports: dict[int, dict[str, CalibrationReport]] = field(default_factory=dict)
    failures: list[AlgorithmFailure] = field(default_factory=list)

    @property
    def n_reports(self) -> int:
        return sum(len(r) for r in self.reports.values())


def sample_seed(seed: int, sample: int) -> int:
    """Noise seed of one error sample, derived from the run seed."""
    return int(np.random.SeedSequence([seed, sample]).generate_state(1)[0])


def simulate_run(
    scene: SceneSpec,
    output_dir: Path,
    errors: int,
    frames: int,
    seed: int,
    angle_bound: float = DEFAULT_ANGLE_BOUND,
    translation_bound: float = DEFAULT_TRANSLATION_BOUND,
) -> RunStorage:
    """Write ``errors`` simulated samples, the geometric prior and a scene echo under ``output_dir``."""
    storage = RunStorage(output_dir)
    create_directory(storage.base_dir)
    for error in sample_calibration_errors(errors, seed, angle_bound, translation_bound):
        noise_seed = sample_seed(seed, error.index)
        with timer(f"Simulating sample {error.index}"):
            observations, ground_truth = make_observation_set(scene, error, frames, noise_seed)
            storage.save_observations(error.index, observations)
            storage.save_ground_truth(error.index, ground_truth, error)
            storage.save_full_cloud(error.index, full_scene_cloud(scene, error, noise_seed))
    storage.save_prior(sample_prior(scene))
    simulation = {"seed": seed, "errors": errors, "frames": frames, **error_bounds_dict(angle_bound, translation_bound)}
    storage.save_scene(scene, {"simulation": simulation})
    logger.info(f"Simulated {errors} samples with {frames} frames per sensor into {storage.base_dir}")
    return storage


def open_input(path: Path) -> tuple[RunStorage, list[int]]:
    """A run directory, or a single ``sample_NNN`` directory inside one.

    Raises:
        ConfigError: If no observations are found
    """
    path = Path(path)
    match = SAMPLE_PATTERN.match(path.name)
    if match and (path / MANIFEST).is_file():
        return RunStorage(path.parent), [int(match.group(1))]
    storage = RunStorage(path)
    samples = [s for s in storage.list_samples() if storage.has_observations(s)]
    if not samples:
        msg = f"No observation sets found under {path}"
        raise ConfigError(msg)
    return storage, samples


def calibrate_run(
    input_dir: Path,
    output_dir: Path,
    config: PipelineConfig,
    algorithms: list[str] | None = None,
) -> CalibrationOutcome:
    """Calibrate every sample of a run with each algorithm, writing one report per (sample, algorithm)."""
    inputs, samples = open_input(input_dir)
    outputs = RunStorage(output_dir)
    prior = read_cloud(Path(config.prior_path)) if config.prior_path else inputs.load_prior()
    algorithms = list(algorithms or config.algorithms)
    outcome = CalibrationOutcome()
    for sample in samples:
        pairs = inputs.load_observations(sample)
        if config.crop_min is not None:
            pairs = crop_observations(pairs, config.crop_min, config.crop_max)
        outcome.reports[sample] = {}
        for algorithm in algorithms:
            try:
                report = run_algorithm(algorithm, pairs, config, prior)
                outputs.save_report(sample, report)
            except EmptyTargetRegion:
                raise
            except CalibrationError as e:
                logger.error(f"Sample {sample}: {algorithm} failed: {type(e).__name__}: {e}")
                outcome.failures.append(AlgorithmFailure.from_error(sample, algorithm, e))
                continue
            outcome.reports[sample][algorithm] = report
    logger.info(f"Wrote {outcome.n_reports} reports, {len(outcome.failures)} algorithm runs failed")
    return outcome


def _validation_mask(scene: SceneSpec | None, cloud: PointCloud, ground_truth: RigidTransform) -> np.ndarray | None:
    if scene is None or scene.validation_cube is None:
        return None
    # Cloud points carry the injected error; locate the target at their true positions.
    return cube_points_mask(inverse(ground_truth).apply(cloud.points), [scene.validation_cube])


def evaluate_run(
    reports_dir: Path,
    truth_dir: Path,
    output_dir: Path,
    config: EvaluationConfig | None = None,
) -> list[MetricsTable]:
    """Score every report against its sample's ground truth and write metrics plus a summary.

    Raises:
        ConfigError: If a report has no matching ground truth
        MisalignedBookkeeping: If a report and its ground truth disagree on the pair count
    """
    config = config or EvaluationConfig()
    reports, truth = RunStorage(reports_dir), RunStorage(truth_dir)
    scene_path = truth.base_dir / SCENE
    scene = load_scene(scene_path) if scene_path.is_file() else None
    samples = reports.list_samples()
    if not samples:
        msg = f"No calibration reports found under {reports_dir}"
        raise ConfigError(msg)

    present = {a for s in samples for a in reports.list_reports(s)}
    algorithms = [a for a in ALGORITHMS if a in present]
    per_algorithm: dict[str, list[MetricsTable]] = {a: [] for a in algorithms}
    profiles: dict[str, list] = {a: [] for a in algorithms}
    for sample in samples:
        if not truth.has_observations(sample):
            msg = f"No ground truth for {reports.sample_dir(sample)} under {truth.base_dir}"
            raise ConfigError(msg)
        ground_truth = truth.load_ground_truth(sample)
        pairs = truth.load_observations(sample)
        full_cloud = truth.load_full_cloud(sample)
        mask = _validation_mask(scene, full_cloud, ground_truth) if full_cloud is not None else None
        for algorithm in [a for a in reports.list_reports(sample) if a in per_algorithm]:
            report = reports.load_report(sample, algorithm)
            if report.n_pairs != pairs.n_pairs:
                msg = (
                    f"{reports.sample_dir(sample) / (algorithm + '_report.json')}: "
                    f"{report.n_pairs} pairs, ground truth has {pairs.n_pairs}"
                )
                raise MisalignedBookkeeping(msg)
            clouds = [pairs.pair(j)[1] for j in report.pair_indices]
            table = build_metrics_table(
                algorithm,
                sample,
                report.pair_indices,
                report.per_pair_transforms,
                ground_truth,
                clouds,
                config.miscalibration_threshold,
                failures=len(report.failures),
            )
            if full_cloud is not None:
                profiles[algorithm].append(global_range_profile(full_cloud, ground_truth, report.mean_transform))
                if mask is not None:
                    error = validation_cube_error(full_cloud, mask, ground_truth, report.mean_transform)
                    table = replace(table, validation_error=error)
            per_algorithm[algorithm].append(table)

    create_directory(Path(output_dir))
    merged = []
    for algorithm in algorithms:
        pooled = pooled_range_profile(profiles[algorithm], config.bin_width) if profiles[algorithm] else None
        table = merge_tables(per_algorithm[algorithm], pooled.fit if pooled else None)
        export_metrics(table, Path(output_dir) / f"{algorithm}_metrics.csv", "csv")
        export_metrics(table, Path(output_dir) / f"{algorithm}_metrics.json", "json")
        if pooled is not None:
            atomic_write_text(Path(output_dir) / f"{algorithm}_range_profile.csv", profile_csv(pooled))
            atomic_write_text(Path(output_dir) / f"{algorithm}_range_points.csv", profile_points_csv(pooled))
        merged.append(table)
    write_summary(merged, Path(output_dir))
    return merged

