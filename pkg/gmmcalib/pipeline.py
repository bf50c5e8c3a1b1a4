"""From paired observations to a calibration transform per algorithm.

Calibration transforms map first-sensor coordinates to second-sensor coordinates (both
expressed in the vehicle frame after nominal pre-alignment).
"""

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from gmmcalib.config import ALGORITHM_BY_VARIANT, VARIANT_BY_ALGORITHM, IcpConfig, PipelineConfig
from gmmcalib.errors import CalibrationError, EmptyModel, EmptyTargetRegion, MisalignedBookkeeping, RegistrationFailed
from gmmcalib.gmm import GmmModel, JointRegistrationResult, joint_register
from gmmcalib.icp import icp_point_to_point, register_pair
from gmmcalib.perf import timer
from gmmcalib.pointcloud import ObservationSet, PointCloud, SpatialIndex, crop_box
from gmmcalib.se3 import EulerPose, RigidTransform, compose, inverse, mean_transform, transform_to_euler
from gmmcalib.utils import worker_count

logger = logging.getLogger(__name__)

HAUSDORFF_PERCENTILE = 95.0


@dataclass(frozen=True, eq=False)
class CalibrationReport:
    """Per-pair and aggregated calibration of one algorithm.

    ``pair_indices[k]`` names the pair ``per_pair_transforms[k]`` came from. Pairs whose
    registration failed outright are listed in ``failures`` and excluded from the mean.
    """

    algorithm: str
    pair_indices: list[int]
    per_pair_transforms: list[RigidTransform]
    mean_transform: RigidTransform
    failures: dict[int, str] = field(default_factory=dict)
    reconstruction: GmmModel | None = None
    plausibility: float | None = None
    plausibility_error: str | None = None
    converged: bool | None = None
    iterations: int | None = None
    log_likelihood_trace: list[float] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def per_pair_euler(self) -> list[EulerPose]:
        return [transform_to_euler(t) for t in self.per_pair_transforms]

    @property
    def n_pairs(self) -> int:
        return len(self.pair_indices) + len(self.failures)

    def with_plausibility(self, score: float | None, error: str | None = None) -> "CalibrationReport":
        return replace(self, plausibility=score, plausibility_error=error)

    def to_dict(self) -> dict[str, Any]:
        return {
            "algorithm": self.algorithm,
            "n_pairs": self.n_pairs,
            "pairs": [
                {"pair_index": j, "matrix": t.as_matrix().tolist(), "euler": transform_to_euler(t).to_dict()}
                for j, t in zip(self.pair_indices, self.per_pair_transforms, strict=True)
            ],
            "mean_transform": {
                "matrix": self.mean_transform.as_matrix().tolist(),
                "euler": transform_to_euler(self.mean_transform).to_dict(),
            },
            "failures": {str(j): reason for j, reason in sorted(self.failures.items())},
            "reconstruction": self.reconstruction.to_dict() if self.reconstruction is not None else None,
            "plausibility": self.plausibility,
            "plausibility_error": self.plausibility_error,
            "converged": self.converged,
            "iterations": self.iterations,
            "log_likelihood_trace": self.log_likelihood_trace,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CalibrationReport":
        reconstruction = data.get("reconstruction")
        return cls(
            algorithm=data["algorithm"],
            pair_indices=[int(p["pair_index"]) for p in data["pairs"]],
            per_pair_transforms=[RigidTransform.from_matrix(p["matrix"]) for p in data["pairs"]],
            mean_transform=RigidTransform.from_matrix(data["mean_transform"]["matrix"]),
            failures={int(j): reason for j, reason in data.get("failures", {}).items()},
            reconstruction=GmmModel.from_dict(reconstruction) if reconstruction else None,
            plausibility=data.get("plausibility"),
            plausibility_error=data.get("plausibility_error"),
            converged=data.get("converged"),
            iterations=data.get("iterations"),
            log_likelihood_trace=list(data.get("log_likelihood_trace", [])),
            config=dict(data.get("config", {})),
        )


def _aggregate(
    algorithm: str, indexed: Sequence[tuple[int, RigidTransform]], failures: dict[int, str], **extra: Any
) -> CalibrationReport:
    if not indexed:
        msg = f"{algorithm}: registration failed for all {len(failures)} pairs"
        raise RegistrationFailed(msg)
    pair_indices = [j for j, _ in indexed]
    transforms = [t for _, t in indexed]
    return CalibrationReport(algorithm, pair_indices, transforms, mean_transform(transforms), failures, **extra)


def recover_calibration_gmm(
    result: JointRegistrationResult, pairs: ObservationSet, config: dict[str, Any] | None = None
) -> CalibrationReport:
    """Per pair ``T = inverse(T_L2->R) * T_L1->R``, sensor membership taken from the pair index.

    Raises:
        MisalignedBookkeeping: If the transforms do not line up with the observation set
    """
    n = len(result.transforms)
    if n != len(pairs.observations):
        msg = f"Got {n} registration transforms for {len(pairs.observations)} observations"
        raise MisalignedBookkeeping(msg)
    indexed = []
    for j in sorted(pairs.pair_index):
        first, second = pairs.pair_index[j]
        if not (0 <= first < n and 0 <= second < n):
            msg = f"Pair {j} refers to observations ({first}, {second}) outside 0..{n - 1}"
            raise MisalignedBookkeeping(msg)
        indexed.append((j, compose(inverse(result.transforms[second]), result.transforms[first])))
    return _aggregate(
        "gmm",
        indexed,
        {},
        reconstruction=result.model,
        converged=result.converged,
        iterations=result.iterations,
        log_likelihood_trace=list(result.log_likelihood_trace),
        config=config or {},
    )


def recover_calibration_icp(
    variant: str, pairs: ObservationSet, config: IcpConfig | None = None, threads: int | None = None
) -> CalibrationReport:
    """Register every pair with the second sensor as source and the first as target.

    Pairs run concurrently. A pair raising a registration error is recorded as failed.

    Raises:
        RegistrationFailed: If every pair failed
    """
    config = config or IcpConfig(variant=variant)
    algorithm = ALGORITHM_BY_VARIANT[variant]

    def run(j: int) -> tuple[int, RigidTransform | None, str | None]:
        target, source = pairs.pair(j)
        try:
            result = register_pair(source, target, config)
        except CalibrationError as e:
            return j, None, f"{type(e).__name__}: {e}"
        return j, inverse(result.transform), None

    indices = sorted(pairs.pair_index)
    workers = min(worker_count(threads), len(indices))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        outcomes = list(pool.map(run, indices))

    failures = {j: reason for j, _, reason in outcomes if reason is not None}
    indexed = [(j, t) for j, t, _ in outcomes if t is not None]
    if failures:
        logger.warning(f"{algorithm}: {len(failures)} of {len(indices)} pairs failed to register")
    return _aggregate(algorithm, indexed, failures, config=config.to_dict())


def plausibility_check(
    model: GmmModel, prior: PointCloud, pruning_factor: float = 0.25, gate: float = 1.0
) -> float:
    """Robust symmetric Hausdorff distance between the pruned model means and the prior.

    The surviving means are first aligned onto the prior with point-to-point ICP; the
    score is the larger of the two directional 95th percentile nearest-neighbour distances.

    Raises:
        EmptyModel: If no component survives pruning
    """
    mask = model.surviving(pruning_factor)
    if not np.any(mask):
        msg = f"No mixture component has weight >= {pruning_factor}/{model.n_components}"
        raise EmptyModel(msg)
    means = PointCloud(model.means[mask])
    aligned = means.points
    try:
        result = icp_point_to_point(means, prior, IcpConfig(variant="point", max_correspondence_distance=gate))
        aligned = result.transform.apply(means.points)
    except CalibrationError as e:
        logger.warning(f"Could not align reconstruction to the prior, scoring unaligned: {e}")
    to_prior, _ = SpatialIndex(prior.points).query(aligned)
    to_model, _ = SpatialIndex(aligned).query(prior.points)
    score = max(np.percentile(to_prior, HAUSDORFF_PERCENTILE), np.percentile(to_model, HAUSDORFF_PERCENTILE))
    return float(score)


def crop_observations(pairs: ObservationSet, lower: Sequence[float], upper: Sequence[float]) -> ObservationSet:
    """Crop every observation to the target box, keeping the pair bookkeeping."""
    cropped = tuple(crop_box(c, lower, upper) for c in pairs.observations)
    empty = [i for i, c in enumerate(cropped) if c.is_empty]
    if empty:
        msg = f"Observations {empty} have no points inside the crop box"
        raise EmptyTargetRegion(msg)
    return ObservationSet(cropped, pairs.pair_index)


def score_reconstruction(report: CalibrationReport, prior: PointCloud, config: PipelineConfig) -> CalibrationReport:
    """Attach the plausibility score of the report's reconstruction, or the reason it could not be scored."""
    if report.reconstruction is None:
        return report
    try:
        score = plausibility_check(report.reconstruction, prior, config.pruning_factor)
    except CalibrationError as e:
        logger.warning(f"{report.algorithm}: plausibility check failed: {e}")
        return report.with_plausibility(None, f"{type(e).__name__}: {e}")
    if score > config.plausibility_threshold:
        logger.warning(
            f"{report.algorithm}: plausibility score {score:.4f} m exceeds {config.plausibility_threshold:.4f} m"
        )
    return report.with_plausibility(score)


def run_algorithm(
    algorithm: str, pairs: ObservationSet, config: PipelineConfig, prior: PointCloud | None = None
) -> CalibrationReport:
    """Calibrate ``pairs`` with one algorithm, scoring the reconstruction against ``prior`` if given."""
    with timer(f"{algorithm} calibration"):
        if algorithm == "gmm":
            result = joint_register(pairs, config.gmm)
            report = recover_calibration_gmm(result, pairs, config.gmm.to_dict())
            if prior is not None:
                report = score_reconstruction(report, prior, config)
            return report
        variant = VARIANT_BY_ALGORITHM[algorithm]
        return recover_calibration_icp(variant, pairs, config.icp_config(variant), config.threads)


def run_calibration(
    pairs: ObservationSet,
    config: PipelineConfig,
    algorithms: Sequence[str] | None = None,
    prior: PointCloud | None = None,
) -> dict[str, CalibrationReport]:
    """Run each selected algorithm on identical (optionally cropped) inputs."""
    if config.crop_min is not None:
        pairs = crop_observations(pairs, config.crop_min, config.crop_max)
    return {a: run_algorithm(a, pairs, config, prior) for a in (algorithms or config.algorithms)}
