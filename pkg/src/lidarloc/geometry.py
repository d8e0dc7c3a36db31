"""Rigid transforms, voxelization and pose-error metrics.

Conventions:
    A ``Pose`` maps sensor-frame points into the world frame,
    ``p_world = R @ p_local + t``. Rotations live in memory as 3x3 matrices;
    quaternions (scalar first, Hamilton) only appear at file boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidInputError

ORTHO_TOL = 1e-9


def as_cloud(points, name="cloud") -> np.ndarray:
    """Validate and return an (N, 3) float64 array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == 3:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidInputError(f"{name} must have shape (N, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite coordinates")
    return arr


@dataclass(frozen=True)
class Pose:
    """Rigid SE(3) transform (sensor -> world)."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64)
        trans = np.array(self.translation, dtype=np.float64).reshape(-1)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise InvalidInputError("pose needs a 3x3 rotation and a 3-vector translation")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise InvalidInputError("pose contains non-finite values")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > ORTHO_TOL:
            raise InvalidInputError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > ORTHO_TOL:
            raise InvalidInputError("rotation determinant is not +1")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> Pose:
        return cls(np.eye(3), t)

    @classmethod
    def from_quaternion(cls, q_wxyz, t) -> Pose:
        q = np.asarray(q_wxyz, dtype=np.float64)
        return cls(Rotation.from_quat(q, scalar_first=True).as_matrix(), t)

    def quaternion(self) -> np.ndarray:
        """Unit quaternion (w, x, y, z) with w >= 0."""
        q = Rotation.from_matrix(self.rotation).as_quat(canonical=True, scalar_first=True)
        return q

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: Pose) -> Pose:
        return compose(self, other)


def compose(a: Pose, b: Pose) -> Pose:
    """Return a∘b, i.e. apply b first then a."""
    rot = a.rotation @ b.rotation
    # re-orthonormalize to keep long chains inside the validation tolerance
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    return Pose(rot, a.rotation @ b.translation + a.translation)


def apply_pose(pose: Pose, cloud) -> np.ndarray:
    pts = as_cloud(cloud)
    return pts @ pose.rotation.T + pose.translation


def invert_pose(pose: Pose) -> Pose:
    rt = pose.rotation.T
    return Pose(rt, -rt @ pose.translation)


def yaw_rotation(angle: float, altitude_shift: float = 0.0) -> Pose:
    """Rotation about +z by ``angle`` radians followed by a vertical shift."""
    if not (math.isfinite(angle) and math.isfinite(altitude_shift)):
        raise InvalidInputError("yaw angle and altitude shift must be finite")
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return Pose(rot, np.array([0.0, 0.0, altitude_shift]))


def rotation_angle(rot: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix in radians, in [0, pi].

    Uses atan2 of the skew and symmetric parts; arccos of the trace loses
    about half the significant digits near zero.
    """
    skew = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    sin_a = 0.5 * np.linalg.norm(skew)
    cos_a = 0.5 * (np.trace(rot) - 1.0)
    return math.atan2(sin_a, cos_a)


@dataclass(frozen=True)
class PoseError:
    position_error: float
    orientation_error: float


def pose_error(estimate: Pose, ground_truth: Pose) -> PoseError:
    """Translation distance [m] and geodesic rotation distance [deg]."""
    pos = float(np.linalg.norm(estimate.translation - ground_truth.translation))
    rel = ground_truth.rotation.T @ estimate.rotation
    return PoseError(pos, math.degrees(rotation_angle(rel)))


@dataclass(frozen=True)
class VoxelGrid:
    """Occupied voxels of a point cloud.

    ``indices[v]`` is the integer cell of voxel ``v``; ``point_voxel[i]`` is the
    voxel holding input point ``i``. Voxels are enumerated in lexicographic
    order of their cell indices.
    """

    voxel_size: float
    origin: np.ndarray
    indices: np.ndarray
    positions: np.ndarray
    point_voxel: np.ndarray
    points: np.ndarray

    def __len__(self):
        return len(self.indices)

    def members(self, v: int) -> np.ndarray:
        return self.points[self.point_voxel == v]


def voxelize(cloud, voxel_size: float) -> VoxelGrid:
    pts = as_cloud(cloud)
    if len(pts) == 0:
        raise InvalidInputError("cannot voxelize an empty cloud")
    if not voxel_size > 0:
        raise InvalidInputError("voxel_size must be positive")
    origin = pts.min(axis=0)
    cells = np.floor((pts - origin) / voxel_size).astype(np.int64)
    uniq, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, pts)
    centroids = sums / counts[:, None]
    return VoxelGrid(float(voxel_size), origin, uniq, centroids, inverse, pts)
