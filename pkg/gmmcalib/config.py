"""Typed configuration blocks and strict JSON loading.

Every block rejects unknown keys. Files carry ``schema_version`` and, wherever randomness
is involved, an explicit ``seed``: nothing is seeded from the clock.
"""

import json
import logging
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from gmmcalib.errors import ConfigError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

DEFAULT_COMPONENTS = 400
POINTS_PER_COMPONENT = 50
MIN_COMPONENTS = 8
DEFAULT_OUTLIER_WEIGHT = 0.05
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITERATIONS = 200
DEFAULT_CUBE_EDGE = 0.5
DEFAULT_VARIANCE_FLOOR = 1e-6

DEFAULT_GATE = 1.0
DEFAULT_ICP_ITERATIONS = 100
DEFAULT_TRANSFORM_TOLERANCE = 1e-6
DEFAULT_NORMAL_K = 15
DEFAULT_COVARIANCE_K = 20
DEFAULT_GICP_EPSILON = 1e-3

DEFAULT_PLAUSIBILITY_THRESHOLD = 0.05
DEFAULT_PRUNING_FACTOR = 0.25
DEFAULT_MISCALIBRATION_THRESHOLD = 0.1
DEFAULT_BIN_WIDTH = 0.5

ICP_VARIANTS = ("point", "plane", "gicp")
ALGORITHMS = ("gmm", "point_icp", "plane_icp", "gicp")
ALGORITHM_BY_VARIANT = {"point": "point_icp", "plane": "plane_icp", "gicp": "gicp"}
VARIANT_BY_ALGORITHM = {v: k for k, v in ALGORITHM_BY_VARIANT.items()}


def check_keys(data: Any, allowed: set[str] | tuple[str, ...], where: str) -> Mapping[str, Any]:
    """Ensure ``data`` is a mapping whose keys are all in ``allowed``."""
    if not isinstance(data, Mapping):
        msg = f"{where}: expected an object, got {type(data).__name__}"
        raise ConfigError(msg)
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        msg = f"{where}: unknown key(s) {', '.join(unknown)}"
        raise ConfigError(msg)
    return data


def _dataclass_from(cls, data: Any, where: str):
    allowed = {f.name for f in fields(cls)}
    values = check_keys(data, allowed, where)
    try:
        return cls(**values)
    except TypeError as e:
        msg = f"{where}: {e}"
        raise ConfigError(msg) from e


@dataclass(frozen=True)
class GmmConfig:
    """Joint registration settings. ``components=None`` scales M with the data size."""

    components: int | None = None
    outlier_weight: float = DEFAULT_OUTLIER_WEIGHT
    tol: float = DEFAULT_TOL
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    seed: int = 0
    cube_edge_init: float = DEFAULT_CUBE_EDGE
    variance_floor: float = DEFAULT_VARIANCE_FLOOR
    threads: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.outlier_weight < 1.0:
            msg = f"outlier_weight must be in [0, 1), got {self.outlier_weight}"
            raise ConfigError(msg)
        if self.tol <= 0 or self.max_iterations < 1:
            msg = "tol must be > 0 and max_iterations >= 1"
            raise ConfigError(msg)
        if self.cube_edge_init <= 0 or self.variance_floor <= 0:
            msg = "cube_edge_init and variance_floor must be positive"
            raise ConfigError(msg)

    def resolve_components(self, total_points: int) -> int:
        """Component count: the configured value, else min(400, total_points / 50)."""
        if self.components is not None:
            return self.components
        return max(MIN_COMPONENTS, min(DEFAULT_COMPONENTS, total_points // POINTS_PER_COMPONENT))

    @classmethod
    def from_dict(cls, data: Any, where: str = "gmm") -> "GmmConfig":
        return _dataclass_from(cls, data, where)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class IcpConfig:
    variant: str = "point"
    max_correspondence_distance: float = DEFAULT_GATE
    max_iterations: int = DEFAULT_ICP_ITERATIONS
    transform_tolerance: float = DEFAULT_TRANSFORM_TOLERANCE
    normal_k: int = DEFAULT_NORMAL_K
    covariance_k: int = DEFAULT_COVARIANCE_K
    gicp_epsilon: float = DEFAULT_GICP_EPSILON

    def __post_init__(self):
        if self.variant not in ICP_VARIANTS:
            msg = f"ICP variant must be one of {ICP_VARIANTS}, got {self.variant!r}"
            raise ConfigError(msg)
        if self.max_correspondence_distance <= 0:
            msg = "max_correspondence_distance must be > 0"
            raise ConfigError(msg)
        if self.max_iterations < 1:
            msg = "max_iterations must be >= 1"
            raise ConfigError(msg)
        if self.normal_k < 3 or self.covariance_k < 3:
            msg = "normal_k and covariance_k must be >= 3"
            raise ConfigError(msg)

    @classmethod
    def from_dict(cls, data: Any, variant: str, where: str = "icp") -> "IcpConfig":
        values = dict(check_keys(data, {f.name for f in fields(cls)}, where))
        if values.setdefault("variant", variant) != variant:
            msg = f"{where}: variant {values['variant']!r} does not match block {variant!r}"
            raise ConfigError(msg)
        return _dataclass_from(cls, values, where)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class PipelineConfig:
    """Settings for ``calibrate``: algorithm selection and per-algorithm blocks."""

    seed: int = 0
    algorithms: tuple[str, ...] = ALGORITHMS
    gmm: GmmConfig = field(default_factory=GmmConfig)
    icp: Mapping[str, IcpConfig] = field(default_factory=lambda: {v: IcpConfig(variant=v) for v in ICP_VARIANTS})
    crop_min: tuple[float, float, float] | None = None
    crop_max: tuple[float, float, float] | None = None
    prior_path: str | None = None
    plausibility_threshold: float = DEFAULT_PLAUSIBILITY_THRESHOLD
    pruning_factor: float = DEFAULT_PRUNING_FACTOR
    threads: int | None = None

    def __post_init__(self):
        unknown = [a for a in self.algorithms if a not in ALGORITHMS]
        if unknown:
            msg = f"Unknown algorithm(s) {unknown}; choose from {ALGORITHMS}"
            raise ConfigError(msg)
        if (self.crop_min is None) != (self.crop_max is None):
            msg = "crop_box needs both min and max"
            raise ConfigError(msg)

    def icp_config(self, variant: str) -> IcpConfig:
        return self.icp.get(variant) or IcpConfig(variant=variant)

    @classmethod
    def from_dict(cls, data: Any, where: str = "pipeline") -> "PipelineConfig":
        allowed = {
            "schema_version",
            "seed",
            "algorithms",
            "gmm",
            "icp",
            "crop_box",
            "prior_path",
            "plausibility_threshold",
            "pruning_factor",
            "threads",
        }
        values = dict(check_keys(data, allowed, where))
        version = values.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            msg = f"{where}: schema_version {version} is not supported (expected {SCHEMA_VERSION})"
            raise ConfigError(msg)
        if "seed" not in values:
            msg = f"{where}: a 'seed' is required"
            raise ConfigError(msg)
        seed = int(values["seed"])
        gmm_block = dict(values.pop("gmm", {}))
        gmm_block.setdefault("seed", seed)
        values["gmm"] = GmmConfig.from_dict(gmm_block, f"{where}.gmm")
        icp_blocks = check_keys(values.pop("icp", {}), ICP_VARIANTS, f"{where}.icp")
        values["icp"] = {
            v: IcpConfig.from_dict(icp_blocks.get(v, {}), v, f"{where}.icp.{v}") for v in ICP_VARIANTS
        }
        if "algorithms" in values:
            values["algorithms"] = tuple(values["algorithms"])
        crop = values.pop("crop_box", None)
        if crop is not None:
            crop = check_keys(crop, {"min", "max"}, f"{where}.crop_box")
            values["crop_min"] = tuple(float(v) for v in crop["min"])
            values["crop_max"] = tuple(float(v) for v in crop["max"])
        return _dataclass_from(cls, values, where)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "algorithms": list(self.algorithms),
            "gmm": self.gmm.to_dict(),
            "icp": {v: c.to_dict() for v, c in sorted(self.icp.items())},
            "prior_path": self.prior_path,
            "plausibility_threshold": self.plausibility_threshold,
            "pruning_factor": self.pruning_factor,
            "threads": self.threads,
        }
        if self.crop_min is not None:
            out["crop_box"] = {"min": list(self.crop_min), "max": list(self.crop_max)}
        return out


@dataclass(frozen=True)
class EvaluationConfig:
    miscalibration_threshold: float = DEFAULT_MISCALIBRATION_THRESHOLD
    bin_width: float = DEFAULT_BIN_WIDTH

    def __post_init__(self):
        if self.miscalibration_threshold <= 0 or self.bin_width <= 0:
            msg = "miscalibration_threshold and bin_width must be positive"
            raise ConfigError(msg)

    @classmethod
    def from_dict(cls, data: Any, where: str = "evaluation") -> "EvaluationConfig":
        return _dataclass_from(cls, data, where)


@dataclass(frozen=True)
class RunConfig:
    """Top-level file for ``compare``: one block per stage of the workflow."""

    seed: int
    scene: str | None = None
    preset: str = "desk"
    errors: int = 25
    frames: int = 20
    output_dir: str = "gmmcalib-run"
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, data: Any, where: str = "run") -> "RunConfig":
        allowed = {f.name for f in fields(cls)}
        values = dict(check_keys(data, allowed, where))
        if values.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            msg = f"{where}: schema_version {values['schema_version']} is not supported"
            raise ConfigError(msg)
        if "seed" not in values:
            msg = f"{where}: a 'seed' is required"
            raise ConfigError(msg)
        pipeline = dict(values.get("pipeline", {}))
        pipeline.setdefault("seed", values["seed"])
        values["pipeline"] = PipelineConfig.from_dict(pipeline, f"{where}.pipeline")
        values["evaluation"] = EvaluationConfig.from_dict(values.get("evaluation", {}), f"{where}.evaluation")
        return _dataclass_from(cls, values, where)


def read_json(path: Path) -> Any:
    """Read a JSON file, converting I/O and syntax failures into ConfigError."""
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        msg = f"File not found: {path}"
        raise ConfigError(msg) from None
    except OSError as e:
        msg = f"Cannot read {path}: {e}"
        raise ConfigError(msg) from e
    except json.JSONDecodeError as e:
        msg = f"Invalid JSON in {path}: {e}"
        raise ConfigError(msg) from e


def load_pipeline_config(path: Path | None, seed: int | None = None) -> PipelineConfig:
    """Load a pipeline config file, or build defaults when no file is given."""
    if path is None:
        return PipelineConfig(seed=seed or 0, gmm=GmmConfig(seed=seed or 0))
    data = read_json(path)
    if isinstance(data, dict) and seed is not None and "seed" not in data:
        data = {**data, "seed": seed}
    config = PipelineConfig.from_dict(data, where=str(path))
    logger.debug(f"Loaded pipeline config from {path}")
    return config


def load_run_config(path: Path) -> RunConfig:
    return RunConfig.from_dict(read_json(path), where=str(path))
