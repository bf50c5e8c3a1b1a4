"""Pairwise ICP baselines: point-to-point, point-to-plane and generalized ICP.

All variants share one loop: gated nearest neighbour correspondences against the target,
a variant specific solve for an incremental transform, left-composed onto the estimate.
The result maps source coordinates into the target frame.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from gmmcalib.config import IcpConfig
from gmmcalib.errors import DegenerateAlignment, DegenerateGeometry, IllConditioned, NoCorrespondences, TooFewPoints
from gmmcalib.gmm import weighted_rigid_alignment
from gmmcalib.pointcloud import PointCloud, SpatialIndex, estimate_normals, local_frames
from gmmcalib.se3 import RigidTransform, compose

logger = logging.getLogger(__name__)

MAX_CONDITION_NUMBER = 1e12


@dataclass(frozen=True, eq=False)
class PairwiseResult:
    transform: RigidTransform
    fitness: float
    rmse: float
    iterations: int
    converged: bool
    objective_trace: list[float] = field(default_factory=list)


# (moved source inliers, source indices, target indices) -> (increment, objective before the step)
StepFunction = Callable[[np.ndarray, np.ndarray, np.ndarray, RigidTransform], tuple[RigidTransform, float]]


def kabsch(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping ``source`` rows onto ``target`` rows.

    Raises:
        DegenerateGeometry: If the source points are collinear or coincident
    """
    try:
        return weighted_rigid_alignment(source, target, np.ones(len(source)))
    except DegenerateAlignment as e:
        raise DegenerateGeometry(str(e)) from e


def _skew(vectors: np.ndarray) -> np.ndarray:
    out = np.zeros((len(vectors), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -vectors[:, 2], vectors[:, 1]
    out[:, 1, 0], out[:, 1, 2] = vectors[:, 2], -vectors[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -vectors[:, 1], vectors[:, 0]
    return out


def _increment(xi: np.ndarray) -> RigidTransform:
    """Rigid increment from a (rotation vector, translation) 6-vector."""
    return RigidTransform(Rotation.from_rotvec(xi[:3]).as_matrix(), xi[3:])


def _solve_normal_equations(hessian: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    condition = np.linalg.cond(hessian)
    if not np.isfinite(condition) or condition > MAX_CONDITION_NUMBER:
        msg = f"6x6 normal equations are ill-conditioned (condition number {condition:.3g})"
        raise IllConditioned(msg)
    return np.linalg.solve(hessian, gradient)


def _update_size(delta: RigidTransform) -> float:
    return float(np.linalg.norm(delta.rotation - np.eye(3)) + np.linalg.norm(delta.translation))


def _run_icp(
    source: PointCloud, target: PointCloud, config: IcpConfig, step: StepFunction, initial: RigidTransform | None
) -> PairwiseResult:
    index = SpatialIndex(target.points)
    transform = initial or RigidTransform.identity()
    trace: list[float] = []
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        moved = transform.apply(source.points)
        distances, target_idx = index.query(moved)
        inliers = distances <= config.max_correspondence_distance
        if not np.any(inliers):
            msg = f"No correspondences within {config.max_correspondence_distance} m at iteration {iterations}"
            raise NoCorrespondences(msg)
        source_idx = np.flatnonzero(inliers)
        delta, objective = step(moved[inliers], source_idx, target_idx[inliers], transform)
        trace.append(objective)
        transform = compose(delta, transform)
        if _update_size(delta) < config.transform_tolerance:
            converged = True
            break

    distances, _ = index.query(transform.apply(source.points))
    inliers = distances <= config.max_correspondence_distance
    fitness = float(inliers.mean())
    rmse = float(np.sqrt(np.mean(distances[inliers] ** 2))) if inliers.any() else 0.0
    logger.debug(
        f"{config.variant} ICP: {iterations} iterations, converged={converged}, fitness={fitness:.3f}, rmse={rmse:.4f}"
    )
    return PairwiseResult(transform, fitness, rmse, iterations, converged, trace)


def _require_points(cloud: PointCloud, n: int, role: str) -> None:
    if len(cloud) < n:
        msg = f"{role} cloud has {len(cloud)} points, need at least {n}"
        raise TooFewPoints(msg)


def icp_point_to_point(
    source: PointCloud, target: PointCloud, config: IcpConfig | None = None, initial: RigidTransform | None = None
) -> PairwiseResult:
    """Classic ICP: closed-form SVD alignment onto nearest neighbours each iteration."""
    config = config or IcpConfig(variant="point")
    _require_points(source, 3, "Source")
    _require_points(target, 3, "Target")

    def step(moved, _source_idx, target_idx, _transform):
        matched = target.points[target_idx]
        objective = float(np.sum((moved - matched) ** 2))
        return kabsch(moved, matched), objective

    return _run_icp(source, target, config, step, initial)


def icp_point_to_plane(
    source: PointCloud, target: PointCloud, config: IcpConfig | None = None, initial: RigidTransform | None = None
) -> PairwiseResult:
    """Minimise squared distances to the target tangent planes.

    Each iteration solves the small-angle linearised problem through its 6x6 normal
    equations; the increment is mapped back onto SO(3) with the rotation-vector exponential.
    """
    config = config or IcpConfig(variant="plane")
    _require_points(source, 3, "Source")
    if target.normals is None:
        target = estimate_normals(target, k=config.normal_k)

    def step(moved, _source_idx, target_idx, _transform):
        matched = target.points[target_idx]
        normals = target.normals[target_idx]
        residual = np.einsum("ij,ij->i", moved - matched, normals)
        jacobian = np.hstack([np.cross(moved, normals), normals])
        xi = _solve_normal_equations(jacobian.T @ jacobian, -jacobian.T @ residual)
        return _increment(xi), float(residual @ residual)

    return _run_icp(source, target, config, step, initial)


def plane_covariances(cloud: PointCloud, k: int, epsilon: float) -> np.ndarray:
    """Per-point covariances U diag(epsilon, 1, 1) U^T from k-NN local frames."""
    _require_points(cloud, k, "Covariance")
    _, neighbours = SpatialIndex(cloud.points).query(cloud.points, k=k)
    frames = local_frames(cloud.points[neighbours])
    return np.einsum("nij,j,nkj->nik", frames, np.array([epsilon, 1.0, 1.0]), frames)


def icp_generalized(
    source: PointCloud, target: PointCloud, config: IcpConfig | None = None, initial: RigidTransform | None = None
) -> PairwiseResult:
    """Generalized ICP: distribution-to-distribution Mahalanobis objective.

    One Gauss-Newton step over SE(3) per correspondence update with weights
    ``(C_t + R C_s R^T)^-1``.
    """
    config = config or IcpConfig(variant="gicp")
    source_cov = plane_covariances(source, config.covariance_k, config.gicp_epsilon)
    target_cov = plane_covariances(target, config.covariance_k, config.gicp_epsilon)

    def step(moved, source_idx, target_idx, transform):
        rotation = transform.rotation
        combined = target_cov[target_idx] + np.einsum("ij,njk,lk->nil", rotation, source_cov[source_idx], rotation)
        weights = np.linalg.inv(combined)
        error = target.points[target_idx] - moved
        # d error / d (omega, v) for moved' = moved + omega x moved + v
        jacobian = np.concatenate([_skew(moved), np.broadcast_to(-np.eye(3), (len(moved), 3, 3))], axis=2)
        weighted_jacobian = np.einsum("nij,njk->nik", weights, jacobian)
        hessian = np.einsum("nji,njk->ik", jacobian, weighted_jacobian)
        gradient = np.einsum("nji,nj->i", weighted_jacobian, error)
        objective = float(np.einsum("ni,nij,nj->", error, weights, error))
        return _increment(_solve_normal_equations(hessian, -gradient)), objective

    return _run_icp(source, target, config, step, initial)


VARIANTS: dict[str, Callable[..., PairwiseResult]] = {
    "point": icp_point_to_point,
    "plane": icp_point_to_plane,
    "gicp": icp_generalized,
}


def register_pair(
    source: PointCloud, target: PointCloud, config: IcpConfig, initial: RigidTransform | None = None
) -> PairwiseResult:
    """Run the ICP variant named by ``config.variant``."""
    return VARIANTS[config.variant](source, target, config, initial)
