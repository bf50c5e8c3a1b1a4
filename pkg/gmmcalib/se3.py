"""Rigid transform algebra on SE(3).

Euler convention used everywhere in this package: extrinsic x-y-z, i.e. roll about the
fixed x axis, then pitch about the fixed y axis, then yaw about the fixed z axis. The
rotation matrix is ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``. Reported calibration errors depend
on this choice.
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from gmmcalib.errors import DegenerateMean, EmptyInput, GimbalProximity

GROUP_TOLERANCE = 1e-9
# Persisted matrices carry 9 significant digits.
CONSTRUCTION_TOLERANCE = 1e-6
GIMBAL_MARGIN = 1e-9


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """A rotation plus translation mapping ``x -> rotation @ x + translation``.

    Construction raises ``ValueError`` unless the rotation is orthonormal with determinant +1
    and every entry is finite.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)
        if not (np.all(np.isfinite(rotation)) and self.is_valid(CONSTRUCTION_TOLERANCE)):
            msg = f"Not a rigid transform: rotation={rotation.tolist()}, translation={translation.tolist()}"
            raise ValueError(msg)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray | Sequence[Sequence[float]]) -> "RigidTransform":
        """Build from a 4x4 homogeneous matrix."""
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            msg = f"Expected a 4x4 matrix, got shape {m.shape}"
            raise ValueError(msg)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> "RigidTransform":
        return cls(np.eye(3), np.array([x, y, z], dtype=np.float64))

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (n, 3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate an (n, 3) array of direction vectors (no translation)."""
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def is_valid(self, tol: float = GROUP_TOLERANCE) -> bool:
        r = self.rotation
        orthonormal = np.allclose(r.T @ r, np.eye(3), rtol=0.0, atol=tol)
        return bool(orthonormal and abs(np.linalg.det(r) - 1.0) <= tol and np.all(np.isfinite(self.translation)))

    def __repr__(self) -> str:
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


@dataclass(frozen=True)
class EulerPose:
    """Roll/pitch/yaw in radians plus a translation in meters."""

    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    FIELDS = ("roll", "pitch", "yaw", "x", "y", "z")

    def as_array(self) -> np.ndarray:
        return np.array([self.roll, self.pitch, self.yaw, self.x, self.y, self.z], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float] | np.ndarray) -> "EulerPose":
        v = [float(a) for a in values]
        if len(v) != 6:
            msg = f"EulerPose needs 6 values, got {len(v)}"
            raise ValueError(msg)
        return cls(*v)

    def abs(self) -> "EulerPose":
        return EulerPose.from_array(np.abs(self.as_array()))

    def to_dict(self) -> dict[str, float]:
        return dict(zip(self.FIELDS, self.as_array().tolist(), strict=True))


def rot_x(angle: float) -> np.ndarray:
    return Rotation.from_euler("x", angle).as_matrix()


def rot_y(angle: float) -> np.ndarray:
    return Rotation.from_euler("y", angle).as_matrix()


def rot_z(angle: float) -> np.ndarray:
    return Rotation.from_euler("z", angle).as_matrix()


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return ``a @ b``: apply ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def project_to_so3(matrix: np.ndarray) -> np.ndarray:
    """Closest rotation (Frobenius norm) to a 3x3 matrix."""
    u, _, vt = np.linalg.svd(matrix)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


def euler_to_transform(p: EulerPose) -> RigidTransform:
    """Build a transform from roll/pitch/yaw and translation.

    Raises:
        GimbalProximity: If |pitch| >= pi/2
    """
    if abs(p.pitch) >= math.pi / 2:
        msg = f"Pitch {p.pitch:.6f} rad is at or beyond the gimbal lock singularity"
        raise GimbalProximity(msg)
    rotation = Rotation.from_euler("xyz", [p.roll, p.pitch, p.yaw]).as_matrix()
    return RigidTransform(rotation, np.array([p.x, p.y, p.z]))


def transform_to_euler(t: RigidTransform) -> EulerPose:
    """Decompose a transform into roll/pitch/yaw and translation.

    Raises:
        GimbalProximity: If |R[2, 0]| >= 1 - 1e-9
    """
    r = t.rotation
    if abs(r[2, 0]) >= 1.0 - GIMBAL_MARGIN:
        msg = f"Rotation is in gimbal lock (R31={r[2, 0]:.12f})"
        raise GimbalProximity(msg)
    pitch = math.atan2(-r[2, 0], math.hypot(r[2, 1], r[2, 2]))
    roll = math.atan2(r[2, 1], r[2, 2])
    yaw = math.atan2(r[1, 0], r[0, 0])
    x, y, z = (float(v) for v in t.translation)
    return EulerPose(roll, pitch, yaw, x, y, z)


def mean_transform(ts: Sequence[RigidTransform]) -> RigidTransform:
    """Chordal L2 mean of rotations and arithmetic mean of translations.

    Entry sums use ``math.fsum`` so the result does not depend on input order.

    Raises:
        EmptyInput: If ``ts`` is empty
        DegenerateMean: If the averaged rotation matrix has rank < 2
    """
    if not ts:
        msg = "mean_transform needs at least one transform"
        raise EmptyInput(msg)
    n = len(ts)
    rotations = np.stack([t.rotation for t in ts])
    translations = np.stack([t.translation for t in ts])
    avg_rotation = np.array([[math.fsum(rotations[:, i, j]) / n for j in range(3)] for i in range(3)])
    avg_translation = np.array([math.fsum(translations[:, i]) / n for i in range(3)])

    singular_values = np.linalg.svd(avg_rotation, compute_uv=False)
    if singular_values[1] <= 1e-12:
        msg = f"Averaged rotation matrix is rank deficient (singular values {singular_values.tolist()})"
        raise DegenerateMean(msg)
    rotation = project_to_so3(avg_rotation)
    assert np.linalg.det(rotation) > 0
    return RigidTransform(rotation, avg_translation)


def rotation_angle(t: RigidTransform) -> float:
    """Geodesic rotation angle of a transform in radians."""
    return float(Rotation.from_matrix(t.rotation).magnitude())


def random_transform(
    rng: np.random.Generator, max_angle: float = math.pi, max_translation: float = 1.0
) -> RigidTransform:
    """Draw a rigid transform with a uniformly random axis."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    rotation = Rotation.from_rotvec(angle * axis).as_matrix()
    return RigidTransform(rotation, rng.uniform(-max_translation, max_translation, size=3))
