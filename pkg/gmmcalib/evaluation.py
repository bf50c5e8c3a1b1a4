"""Calibration accuracy metrics against a known ground truth."""

import csv
import io
import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from gmmcalib.config import DEFAULT_BIN_WIDTH
from gmmcalib.errors import EmptyCloud, ParseError, UnsupportedFormat
from gmmcalib.pointcloud import PointCloud
from gmmcalib.se3 import EulerPose, RigidTransform, compose, inverse, transform_to_euler
from gmmcalib.utils import atomic_write_text, dump_json

logger = logging.getLogger(__name__)

CSV_COLUMNS = (
    "algorithm",
    "pair_index",
    "d_roll",
    "d_pitch",
    "d_yaw",
    "dx",
    "dy",
    "dz",
    "dist_x",
    "dist_y",
    "dist_z",
)
PROFILE_COLUMNS = ("bin_center", "mean_error", "std_error", "count")
PROFILE_POINT_COLUMNS = ("x", "error")


def _fmt(value: float) -> str:
    return f"{value:.9g}"


@dataclass(frozen=True)
class RangeFit:
    """Least-squares line through (x distance, L2 error) with ±1 residual-std bounds."""

    slope: float
    intercept: float
    std: float

    @property
    def std_lower(self) -> float:
        return self.intercept - self.std

    @property
    def std_upper(self) -> float:
        return self.intercept + self.std

    def to_dict(self) -> dict[str, float]:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "std": self.std,
            "std_lower": self.std_lower,
            "std_upper": self.std_upper,
        }


@dataclass(frozen=True, eq=False)
class RangeProfile:
    x: np.ndarray
    errors: np.ndarray
    fit: RangeFit
    bins: list[tuple[float, float, float, int]]


@dataclass(frozen=True, eq=False)
class MetricsTable:
    """Per-pair errors of one algorithm over a run.

    ``pair_indices`` number the rows across the whole run; ``sample_ids`` say which error
    sample each row came from.
    """

    algorithm: str
    pair_indices: list[int]
    per_pair_delta: list[EulerPose]
    distance_errors: np.ndarray
    sample_ids: list[int] = field(default_factory=list)
    global_fit: RangeFit | None = None
    threshold: float = 0.1
    failures: int = 0
    validation_error: float | None = None

    def __post_init__(self):
        errors = np.asarray(self.distance_errors, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "distance_errors", errors)
        if not len(self.pair_indices) == len(self.per_pair_delta) == len(errors):
            msg = "Metrics lists must all have one entry per pair"
            raise ValueError(msg)
        if not self.sample_ids:
            object.__setattr__(self, "sample_ids", [0] * len(errors))

    @property
    def n_pairs(self) -> int:
        return len(self.pair_indices)

    @property
    def miscalibration_count(self) -> int:
        return count_miscalibrations(self.distance_errors, self.threshold)

    @property
    def mean_delta(self) -> EulerPose:
        """Mean of absolute error components."""
        if not self.per_pair_delta:
            return EulerPose.from_array(np.zeros(6))
        return EulerPose.from_array(np.mean([d.abs().as_array() for d in self.per_pair_delta], axis=0))

    @property
    def mean_abs_distance(self) -> np.ndarray:
        return np.abs(self.distance_errors).mean(axis=0) if self.n_pairs else np.zeros(3)

    def to_dict(self) -> dict[str, Any]:
        return {
            "algorithm": self.algorithm,
            "n_pairs": self.n_pairs,
            "pair_indices": self.pair_indices,
            "sample_ids": self.sample_ids,
            "per_pair_delta": [d.to_dict() for d in self.per_pair_delta],
            "mean_delta": self.mean_delta.to_dict(),
            "distance_errors": self.distance_errors.tolist(),
            "global_fit": self.global_fit.to_dict() if self.global_fit else None,
            "threshold": self.threshold,
            "miscalibration_count": self.miscalibration_count,
            "failures": self.failures,
            "validation_error": self.validation_error,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MetricsTable":
        fit = data.get("global_fit")
        return cls(
            algorithm=data["algorithm"],
            pair_indices=[int(j) for j in data["pair_indices"]],
            per_pair_delta=[EulerPose(**d) for d in data["per_pair_delta"]],
            distance_errors=np.asarray(data["distance_errors"], dtype=np.float64),
            sample_ids=[int(s) for s in data.get("sample_ids", [])],
            global_fit=RangeFit(fit["slope"], fit["intercept"], fit["std"]) if fit else None,
            threshold=float(data.get("threshold", 0.1)),
            failures=int(data.get("failures", 0)),
            validation_error=data.get("validation_error"),
        )


def transformation_error(ground_truth: RigidTransform, estimate: RigidTransform) -> EulerPose:
    """Residual ``inverse(estimate) * ground_truth`` as Euler angles and translation."""
    return transform_to_euler(compose(inverse(estimate), ground_truth))


def _displacements(points: np.ndarray, ground_truth: RigidTransform, estimate: RigidTransform) -> np.ndarray:
    return ground_truth.apply(points) - estimate.apply(points)


def mean_distance_error(cloud: PointCloud, ground_truth: RigidTransform, estimate: RigidTransform) -> np.ndarray:
    """Signed per-axis mean of ``T_gt x - T_est x`` over the cloud's points.

    Raises:
        EmptyCloud: If the cloud has no points
    """
    if cloud.is_empty:
        msg = "Mean distance error needs a non-empty cloud"
        raise EmptyCloud(msg)
    return _displacements(cloud.points, ground_truth, estimate).mean(axis=0)


def fit_line(x: np.ndarray, y: np.ndarray) -> RangeFit:
    if len(x) >= 2 and np.ptp(x) > 0:
        slope, intercept = np.polyfit(x, y, 1)
    else:
        slope, intercept = 0.0, float(np.mean(y)) if len(y) else 0.0
    residuals = y - (slope * x + intercept)
    std = float(np.std(residuals)) if len(y) else 0.0
    return RangeFit(float(slope), float(intercept), std)


def bin_profile(x: np.ndarray, errors: np.ndarray, bin_width: float) -> list[tuple[float, float, float, int]]:
    """Mean and standard deviation of the error per x-bin of width ``bin_width``."""
    keys = np.floor(x / bin_width).astype(np.int64)
    bins = []
    for key in np.unique(keys):
        members = errors[keys == key]
        bins.append(((key + 0.5) * bin_width, float(members.mean()), float(members.std()), len(members)))
    return bins


def global_range_profile(
    full_cloud: PointCloud,
    ground_truth: RigidTransform,
    estimate: RigidTransform,
    bin_width: float = DEFAULT_BIN_WIDTH,
) -> RangeProfile:
    """Per-point L2 error against x distance over an entire scan, with a linear fit.

    Raises:
        EmptyCloud: If the cloud has no points
    """
    if full_cloud.is_empty:
        msg = "Range profile needs a non-empty cloud"
        raise EmptyCloud(msg)
    x = full_cloud.points[:, 0]
    errors = np.linalg.norm(_displacements(full_cloud.points, ground_truth, estimate), axis=1)
    return RangeProfile(x, errors, fit_line(x, errors), bin_profile(x, errors, bin_width))


def pooled_range_profile(profiles: Sequence[RangeProfile], bin_width: float = DEFAULT_BIN_WIDTH) -> RangeProfile:
    """Combine the profiles of several samples into one fit and binning."""
    x = np.concatenate([p.x for p in profiles])
    errors = np.concatenate([p.errors for p in profiles])
    return RangeProfile(x, errors, fit_line(x, errors), bin_profile(x, errors, bin_width))


def count_miscalibrations(distance_errors: np.ndarray | Sequence[Sequence[float]], threshold: float) -> int:
    """Number of pairs whose largest absolute per-axis distance error exceeds ``threshold``."""
    if threshold <= 0:
        msg = f"Miscalibration threshold must be positive, got {threshold}"
        raise ValueError(msg)
    errors = np.asarray(distance_errors, dtype=np.float64).reshape(-1, 3)
    return int(np.count_nonzero(np.abs(errors).max(axis=1, initial=0.0) > threshold))


def validation_cube_error(
    full_cloud: PointCloud, mask: np.ndarray, ground_truth: RigidTransform, estimate: RigidTransform
) -> float | None:
    """Mean L2 error over the points of the long-range validation target, if any were hit."""
    if not np.any(mask):
        return None
    return float(np.linalg.norm(_displacements(full_cloud.points[mask], ground_truth, estimate), axis=1).mean())


def build_metrics_table(
    algorithm: str,
    sample_id: int,
    pair_indices: Sequence[int],
    estimates: Sequence[RigidTransform],
    ground_truth: RigidTransform,
    clouds: Sequence[PointCloud],
    threshold: float,
    failures: int = 0,
) -> MetricsTable:
    """Metrics for one error sample: one row per successfully registered pair.

    ``clouds[k]`` is the second-sensor observation of pair ``pair_indices[k]``.
    """
    deltas = [transformation_error(ground_truth, t) for t in estimates]
    distances = [mean_distance_error(c, ground_truth, t) for c, t in zip(clouds, estimates, strict=True)]
    return MetricsTable(
        algorithm,
        list(pair_indices),
        deltas,
        np.asarray(distances).reshape(-1, 3),
        sample_ids=[sample_id] * len(deltas),
        threshold=threshold,
        failures=failures,
    )


def merge_tables(tables: Sequence[MetricsTable], global_fit: RangeFit | None = None) -> MetricsTable:
    """Concatenate per-sample tables of one algorithm, renumbering rows across the run."""
    if not tables:
        msg = "No metrics tables to merge"
        raise ValueError(msg)
    validation = [t.validation_error for t in tables if t.validation_error is not None]
    deltas = [d for t in tables for d in t.per_pair_delta]
    return MetricsTable(
        tables[0].algorithm,
        list(range(len(deltas))),
        deltas,
        np.concatenate([t.distance_errors for t in tables]) if deltas else np.zeros((0, 3)),
        sample_ids=[s for t in tables for s in t.sample_ids],
        global_fit=global_fit,
        threshold=tables[0].threshold,
        failures=sum(t.failures for t in tables),
        validation_error=float(np.mean(validation)) if validation else None,
    )


def metrics_csv(table: MetricsTable) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for j, delta, dist in zip(table.pair_indices, table.per_pair_delta, table.distance_errors, strict=True):
        writer.writerow([table.algorithm, j, *(_fmt(v) for v in delta.as_array()), *(_fmt(v) for v in dist)])
    return buffer.getvalue()


def export_metrics(table: MetricsTable, path: Path, fmt: str = "csv") -> Path:
    """Write a metrics table as CSV (fixed columns) or JSON."""
    if fmt == "csv":
        text = metrics_csv(table)
    elif fmt == "json":
        text = dump_json(table.to_dict())
    else:
        msg = f"Unknown metrics format {fmt!r}; use 'csv' or 'json'"
        raise UnsupportedFormat(msg)
    atomic_write_text(Path(path), text)
    logger.debug(f"Wrote {table.n_pairs} {table.algorithm} metric rows to {path}")
    return Path(path)


def read_metrics(path: Path, threshold: float = 0.1) -> MetricsTable:
    """Parse a metrics CSV written by ``export_metrics``.

    Raises:
        ParseError: On a wrong header or a malformed row
    """
    path = Path(path)
    if path.suffix == ".json":
        return MetricsTable.from_dict(json.loads(path.read_text()))
    rows = list(csv.reader(io.StringIO(path.read_text())))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        msg = f"Expected header {','.join(CSV_COLUMNS)}"
        raise ParseError(msg, line=1)
    algorithm = ""
    indices, deltas, distances = [], [], []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(CSV_COLUMNS):
            msg = f"Expected {len(CSV_COLUMNS)} fields, got {len(row)}"
            raise ParseError(msg, line=line_no)
        try:
            values = [float(v) for v in row[2:]]
            indices.append(int(row[1]))
        except ValueError as e:
            raise ParseError(str(e), line=line_no) from e
        algorithm = row[0]
        deltas.append(EulerPose.from_array(values[:6]))
        distances.append(values[6:])
    return MetricsTable(algorithm, indices, deltas, np.asarray(distances).reshape(-1, 3), threshold=threshold)


def profile_csv(profile: RangeProfile) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(PROFILE_COLUMNS)
    for center, mean, std, count in profile.bins:
        writer.writerow([_fmt(center), _fmt(mean), _fmt(std), count])
    return buffer.getvalue()


def profile_points_csv(profile: RangeProfile) -> str:
    """Every pooled point as (x distance, L2 error), for plotting the raw scatter."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(PROFILE_POINT_COLUMNS)
    writer.writerows([_fmt(x), _fmt(e)] for x, e in zip(profile.x.tolist(), profile.errors.tolist(), strict=True))
    return buffer.getvalue()

