"""Joint rigid registration of several point clouds to one latent Gaussian mixture.

Every observation ``i`` gets its own rigid transform into the latent frame {R}; the
mixture (isotropic components plus one uniform outlier term) and the transforms are
estimated together by expectation-maximisation. The latent frame is arbitrary: only
relative transforms between observations carry meaning.
"""

import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from gmmcalib.config import DEFAULT_CUBE_EDGE, DEFAULT_OUTLIER_WEIGHT, DEFAULT_VARIANCE_FLOOR, GmmConfig
from gmmcalib.errors import DegenerateAlignment, InvalidComponentCount, NumericUnderflow, TooFewPoints
from gmmcalib.pointcloud import ObservationSet, PointCloud
from gmmcalib.se3 import RigidTransform
from gmmcalib.utils import worker_count

logger = logging.getLogger(__name__)

MIN_POINTS_PER_OBSERVATION = 10
POINTS_PER_INIT_CUBE = 50
BBOX_INFLATION = 0.10
EMPTY_COMPONENT_MASS = 1e-12
RANK_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class GmmModel:
    """Mixture parameters: isotropic components plus a uniform outlier term."""

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    outlier_weight: float
    outlier_density: float

    def __post_init__(self):
        means = np.array(self.means, dtype=np.float64).reshape(-1, 3)
        variances = np.array(self.variances, dtype=np.float64).reshape(-1)
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        if not len(means) == len(variances) == len(weights):
            msg = f"Inconsistent component counts: {len(means)}, {len(variances)}, {len(weights)}"
            raise ValueError(msg)
        if np.any(variances <= 0):
            msg = "Component variances must be positive"
            raise ValueError(msg)
        if self.outlier_density <= 0:
            msg = "Outlier density must be positive"
            raise ValueError(msg)
        total = math.fsum(weights.tolist()) + self.outlier_weight
        if abs(total - 1.0) > 1e-9:
            msg = f"Mixture weights sum to {total!r}, expected 1"
            raise ValueError(msg)
        for arr in (means, variances, weights):
            arr.setflags(write=False)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "outlier_weight", float(self.outlier_weight))
        object.__setattr__(self, "outlier_density", float(self.outlier_density))

    @property
    def n_components(self) -> int:
        return len(self.means)

    def surviving(self, pruning_factor: float) -> np.ndarray:
        """Boolean mask of components with weight >= pruning_factor / M."""
        return self.weights >= pruning_factor / self.n_components

    def reconstruction(self, pruning_factor: float) -> PointCloud:
        """Means of the surviving components: the reconstructed target."""
        return PointCloud(self.means[self.surviving(pruning_factor)], sensor_id="gmm", frame_label="R")

    def to_dict(self) -> dict[str, Any]:
        return {
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "weights": self.weights.tolist(),
            "outlier_weight": self.outlier_weight,
            "outlier_density": self.outlier_density,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "GmmModel":
        return cls(
            np.asarray(data["means"], dtype=np.float64),
            np.asarray(data["variances"], dtype=np.float64),
            np.asarray(data["weights"], dtype=np.float64),
            float(data["outlier_weight"]),
            float(data["outlier_density"]),
        )


@dataclass(frozen=True, eq=False)
class Responsibilities:
    """Posterior component memberships per observation.

    ``posteriors[i]`` is (n_i, M); ``outlier[i]`` is (n_i,). Rows of the two together sum
    to one. ``log_likelihood`` is the observed-data log-likelihood at the parameters the
    posteriors were computed from.
    """

    posteriors: list[np.ndarray]
    outlier: list[np.ndarray]
    log_likelihood: float


@dataclass(frozen=True, eq=False)
class JointRegistrationResult:
    transforms: list[RigidTransform]
    model: GmmModel
    log_likelihood_trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def _point_arrays(observations: ObservationSet | Sequence[PointCloud] | Sequence[np.ndarray]) -> list[np.ndarray]:
    items = observations.observations if isinstance(observations, ObservationSet) else observations
    return [np.asarray(o.points if isinstance(o, PointCloud) else o, dtype=np.float64).reshape(-1, 3) for o in items]


def _map_observations(func, n: int, threads: int | None) -> list:
    """Evaluate ``func(i)`` for every observation, results in observation order."""
    workers = min(worker_count(threads), n)
    if workers <= 1:
        return [func(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, range(n)))


def _sample_box_surface(rng: np.random.Generator, center: np.ndarray, half: np.ndarray, count: int) -> np.ndarray:
    """Uniform samples on the surface of an axis-aligned box."""
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]] * 2)
    probabilities = areas / areas.sum() if areas.sum() > 0 else np.full(6, 1 / 6)
    faces = rng.choice(6, size=count, p=probabilities)
    samples = rng.uniform(-1.0, 1.0, size=(count, 3))
    axes = faces % 3
    signs = np.where(faces < 3, 1.0, -1.0)
    samples[np.arange(count), axes] = signs
    return center + samples * half


def initialize_model(
    observations: ObservationSet | Sequence[PointCloud] | Sequence[np.ndarray],
    m: int,
    seed: int,
    cube_edge: float = DEFAULT_CUBE_EDGE,
    outlier_weight: float = DEFAULT_OUTLIER_WEIGHT,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
) -> GmmModel:
    """Place ``m`` component means on the surfaces of randomly positioned cubes.

    Cube centres are drawn uniformly inside the union bounding box inflated by 10%; cubes
    are kept inside that box. Variances start at (bounding-box diagonal / 10)^2 and the
    weights are uniform.

    Raises:
        InvalidComponentCount: If m < 8
    """
    if m < 8:
        msg = f"Need at least 8 mixture components, got {m}"
        raise InvalidComponentCount(msg)
    arrays = _point_arrays(observations)
    if not arrays or sum(len(a) for a in arrays) == 0:
        msg = "Cannot initialise a mixture from empty observations"
        raise TooFewPoints(msg)
    union = np.concatenate(arrays, axis=0)
    lo, hi = union.min(axis=0), union.max(axis=0)
    extent = hi - lo
    margin = extent * BBOX_INFLATION / 2
    box_lo, box_hi = lo - margin, hi + margin
    box_extent = box_hi - box_lo

    rng = np.random.default_rng(seed)
    half = np.minimum(cube_edge, box_extent) / 2
    n_cubes = max(1, math.ceil(m / POINTS_PER_INIT_CUBE))
    centers = rng.uniform(box_lo + half, box_hi - half, size=(n_cubes, 3))
    counts = np.full(n_cubes, m // n_cubes)
    counts[: m % n_cubes] += 1
    means = np.concatenate([_sample_box_surface(rng, c, half, int(k)) for c, k in zip(centers, counts, strict=True)])

    diagonal = float(np.linalg.norm(extent))
    variance = max((diagonal / 10) ** 2, variance_floor)
    volume = float(np.prod(np.maximum(box_extent, 1e-3)))
    weights = np.full(m, (1.0 - outlier_weight) / m)
    logger.debug(f"Initialised {m} components on {n_cubes} cubes, sigma={math.sqrt(variance):.3f} m")
    return GmmModel(means, np.full(m, variance), weights, outlier_weight, 1.0 / volume)


def _log_joint(points: np.ndarray, model: GmmModel) -> tuple[np.ndarray, np.ndarray]:
    """Per point log p_m N(x; mu_m, s2_m I) for every component, and the outlier log-mass."""
    d2 = cdist(points, model.means, "sqeuclidean")
    with np.errstate(divide="ignore"):
        log_weights = np.log(model.weights)
        log_outlier = math.log(model.outlier_weight * model.outlier_density) if model.outlier_weight > 0 else -np.inf
    log_norm = log_weights - 1.5 * np.log(2.0 * np.pi * model.variances)
    return log_norm - d2 / (2.0 * model.variances), np.full(len(points), log_outlier)


def e_step(
    observations: ObservationSet | Sequence[PointCloud] | Sequence[np.ndarray],
    transforms: Sequence[RigidTransform],
    model: GmmModel,
    threads: int | None = None,
) -> Responsibilities:
    """Posterior memberships of every transformed point, computed in the log domain.

    Raises:
        NumericUnderflow: If a point has zero likelihood under every term
    """
    arrays = _point_arrays(observations)

    def one(i: int) -> tuple[np.ndarray, np.ndarray, float]:
        y = transforms[i].apply(arrays[i])
        log_components, log_outlier = _log_joint(y, model)
        log_all = np.column_stack([log_components, log_outlier])
        log_total = logsumexp(log_all, axis=1)
        if not np.all(np.isfinite(log_total)):
            msg = f"Observation {i}: a point is outside the representable range of every component"
            raise NumericUnderflow(msg)
        posterior = np.exp(log_all - log_total[:, None])
        return posterior[:, :-1], posterior[:, -1], math.fsum(log_total.tolist())

    results = _map_observations(one, len(arrays), threads)
    return Responsibilities(
        posteriors=[r[0] for r in results],
        outlier=[r[1] for r in results],
        log_likelihood=math.fsum(r[2] for r in results),
    )


def log_likelihood(
    observations: ObservationSet | Sequence[PointCloud] | Sequence[np.ndarray],
    transforms: Sequence[RigidTransform],
    model: GmmModel,
) -> float:
    return e_step(observations, transforms, model).log_likelihood


def weighted_rigid_alignment(source: np.ndarray, target: np.ndarray, weights: np.ndarray) -> RigidTransform:
    """Closed-form weighted Procrustes: argmin sum_k w_k |R s_k + t - c_k|^2.

    Raises:
        DegenerateAlignment: If the weighted source covariance has rank < 2
    """
    w = np.asarray(weights, dtype=np.float64)
    total = float(w.sum())
    if total <= 0:
        msg = "All alignment weights are zero"
        raise DegenerateAlignment(msg)
    src_mean = w @ source / total
    tgt_mean = w @ target / total
    src_c = source - src_mean
    tgt_c = target - tgt_mean

    covariance = (src_c * w[:, None]).T @ src_c / total
    eigenvalues = np.linalg.eigvalsh(covariance)
    if eigenvalues[1] <= RANK_TOLERANCE * max(eigenvalues[2], 1.0):
        msg = f"Weighted point covariance is rank deficient (eigenvalues {eigenvalues.tolist()})"
        raise DegenerateAlignment(msg)

    h = (src_c * w[:, None]).T @ tgt_c
    u, _, vt = np.linalg.svd(h)
    d = 1.0 if np.linalg.det(vt.T @ u.T) >= 0 else -1.0
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rotation, tgt_mean - rotation @ src_mean)


def m_step(
    observations: ObservationSet | Sequence[PointCloud] | Sequence[np.ndarray],
    responsibilities: Responsibilities,
    model: GmmModel,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
    threads: int | None = None,
) -> tuple[list[RigidTransform], GmmModel]:
    """Update all transforms, then the mixture parameters.

    Each transform solves a weighted Procrustes problem against per-point virtual targets
    ``w_ik = sum_m (a_ikm / s2_m) mu_m / l_ik`` with weights ``l_ik = sum_m a_ikm / s2_m``.
    Means, variances and weights are then re-estimated from the transformed points.
    Components with no mass keep their mean and variance.
    """
    arrays = _point_arrays(observations)
    inv_var = 1.0 / model.variances

    def align(i: int) -> RigidTransform:
        scaled = responsibilities.posteriors[i] * inv_var
        lam = scaled.sum(axis=1)
        safe = np.where(lam > 0, lam, 1.0)
        virtual = (scaled @ model.means) / safe[:, None]
        try:
            return weighted_rigid_alignment(arrays[i], virtual, lam)
        except DegenerateAlignment as e:
            msg = f"Observation {i}: {e}"
            raise DegenerateAlignment(msg) from e

    transforms = _map_observations(align, len(arrays), threads)
    moved = [t.apply(a) for t, a in zip(transforms, arrays, strict=True)]

    mass = np.sum([alpha.sum(axis=0) for alpha in responsibilities.posteriors], axis=0)
    weighted_sum = np.sum([alpha.T @ y for alpha, y in zip(responsibilities.posteriors, moved, strict=True)], axis=0)
    alive = mass > EMPTY_COMPONENT_MASS
    means = model.means.copy()
    means[alive] = weighted_sum[alive] / mass[alive, None]

    scatter = np.sum(
        [
            (alpha * cdist(y, means, "sqeuclidean")).sum(axis=0)
            for alpha, y in zip(responsibilities.posteriors, moved, strict=True)
        ],
        axis=0,
    )
    variances = model.variances.copy()
    variances[alive] = np.maximum(scatter[alive] / (3.0 * mass[alive]), variance_floor)

    weights = (1.0 - model.outlier_weight) * mass / mass.sum()
    return transforms, GmmModel(means, variances, weights, model.outlier_weight, model.outlier_density)


def joint_register(
    observations: ObservationSet | Sequence[PointCloud] | Sequence[np.ndarray],
    config: GmmConfig | None = None,
    initial_transforms: Sequence[RigidTransform] | None = None,
    initial_model: GmmModel | None = None,
) -> JointRegistrationResult:
    """Register every observation to a common latent mixture by EM.

    Iterates M-step / E-step until the relative log-likelihood improvement drops below
    ``config.tol`` or ``config.max_iterations`` is reached. Without convergence the last
    (best) parameters are returned with ``converged=False``.

    Raises:
        TooFewPoints: Fewer than 2 observations or fewer than 10 points in one of them
        DegenerateAlignment: Propagated from the M-step
    """
    config = config or GmmConfig()
    arrays = _point_arrays(observations)
    if len(arrays) < 2:
        msg = f"Joint registration needs at least 2 observations, got {len(arrays)}"
        raise TooFewPoints(msg)
    small = [i for i, a in enumerate(arrays) if len(a) < MIN_POINTS_PER_OBSERVATION]
    if small:
        msg = f"Observations {small} have fewer than {MIN_POINTS_PER_OBSERVATION} points"
        raise TooFewPoints(msg)

    total_points = sum(len(a) for a in arrays)
    model = initial_model or initialize_model(
        arrays,
        config.resolve_components(total_points),
        config.seed,
        cube_edge=config.cube_edge_init,
        outlier_weight=config.outlier_weight,
        variance_floor=config.variance_floor,
    )
    transforms = (
        list(initial_transforms) if initial_transforms is not None else [RigidTransform.identity()] * len(arrays)
    )
    if len(transforms) != len(arrays):
        msg = f"Got {len(transforms)} initial transforms for {len(arrays)} observations"
        raise ValueError(msg)

    logger.info(
        f"Joint registration of {len(arrays)} observations ({total_points} points) with {model.n_components} components"
    )
    responsibilities = e_step(arrays, transforms, model, threads=config.threads)
    trace = [responsibilities.log_likelihood]
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        transforms, model = m_step(arrays, responsibilities, model, config.variance_floor, threads=config.threads)
        responsibilities = e_step(arrays, transforms, model, threads=config.threads)
        previous, current = trace[-1], responsibilities.log_likelihood
        trace.append(current)
        logger.debug(f"EM iteration {iterations}: log-likelihood {current:.6f}")
        if current < previous - 1e-9 * max(1.0, abs(previous)):
            logger.warning(f"Log-likelihood decreased at iteration {iterations}: {previous:.9g} -> {current:.9g}")
        if abs(current - previous) < config.tol * max(abs(previous), 1e-300):
            converged = True
            break

    if converged:
        logger.info(f"EM converged after {iterations} iterations, log-likelihood {trace[-1]:.6f}")
    else:
        logger.warning(f"EM did not converge within {config.max_iterations} iterations; returning best parameters")
    return JointRegistrationResult(transforms, model, trace, iterations, converged)
