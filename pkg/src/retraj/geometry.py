"""SE(3) pose algebra, trajectories, lateral offsetting, and pinhole projection.

Conventions used throughout the package:

* Poses are camera-to-world rigid transforms.
* Camera axes: +x right, +y down, +z forward (column 0/1/2 of the rotation).
* ``relative_pose(T_src, T_tgt)`` returns the transform taking source-camera
  coordinates to target-camera coordinates, i.e. ``inv(T_tgt) @ T_src``.

All functions here are pure and operate on float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, InvalidPoseError, InvalidParamsError

ORTHONORMAL_TOL = 1e-6
MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform: x_world = rotation @ x_cam + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise InvalidPoseError(f"rotation must be 3x3, got {rot.shape}")
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(trans)):
            raise InvalidPoseError("pose contains non-finite values")
        err = np.max(np.abs(rot.T @ rot - np.eye(3)))
        if err > ORTHONORMAL_TOL:
            raise InvalidPoseError(f"rotation not orthonormal (max error {err:.3e})")
        if abs(np.linalg.det(rot) - 1.0) > ORTHONORMAL_TOL * 10:
            raise InvalidPoseError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(mat: np.ndarray) -> "Pose":
        mat = np.asarray(mat, dtype=np.float64)
        return Pose(mat[:3, :3], mat[:3, 3])

    def matrix(self) -> np.ndarray:
        """Return the 4x4 homogeneous matrix."""
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def matrix3x4(self) -> np.ndarray:
        """Return the compact [R | t] 3x4 matrix (row-major, 12 reals)."""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    def right_axis(self) -> np.ndarray:
        """Camera right axis in world coordinates (first rotation column)."""
        return self.rotation[:, 0].copy()

    def apply(self, point: np.ndarray) -> np.ndarray:
        """Map a camera-frame point to world coordinates."""
        return self.rotation @ np.asarray(point, dtype=np.float64) + self.translation


@dataclass(frozen=True)
class Trajectory:
    """Ordered camera poses along a path; frame_rate is informational."""

    poses: tuple[Pose, ...]
    frame_rate: float = 10.0

    def __post_init__(self):
        poses = tuple(self.poses)
        if len(poses) < 1:
            raise InvalidParamsError("trajectory must contain at least one pose")
        for prev, cur in zip(poses, poses[1:]):
            delta = cur.translation - prev.translation
            if not np.all(np.isfinite(delta)):
                raise InvalidParamsError("non-finite displacement between frames")
        object.__setattr__(self, "poses", poses)

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, i: int) -> Pose:
        return self.poses[i]

    def translations(self) -> np.ndarray:
        return np.stack([p.translation for p in self.poses])


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParamsError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise InvalidParamsError("principal point must lie inside the image")


def se3_inverse(pose: Pose) -> Pose:
    """Inverse rigid transform: compose(pose, se3_inverse(pose)) == identity."""
    rot_inv = pose.rotation.T
    return Pose(rot_inv, -rot_inv @ pose.translation)


def se3_compose(a: Pose, b: Pose) -> Pose:
    """Composition a ∘ b (apply b first, then a); equals the 4x4 product."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def relative_pose(t_src: Pose, t_tgt: Pose) -> Pose:
    """Transform mapping source-camera coordinates to target-camera coordinates.

    Returns inv(t_tgt) ∘ t_src. For t_src == t_tgt this is the identity
    (zero-motion) pose.
    """
    return se3_compose(se3_inverse(t_tgt), t_src)


def lateral_offset_trajectory(traj: Trajectory, delta: float) -> Trajectory:
    """Translate every pose by ``delta`` meters along its own camera-right axis.

    Rotations are carried over unchanged (same array objects), so they are
    bit-identical to the input's.
    """
    poses = tuple(
        Pose(p.rotation, p.translation + delta * p.rotation[:, 0]) for p in traj.poses
    )
    return Trajectory(poses, traj.frame_rate)


def project(point: np.ndarray, pose: Pose, intr: Intrinsics) -> tuple[float, float, float]:
    """Pinhole projection of a world point seen from ``pose``.

    Returns (u, v, depth) in pixels/meters. Raises BehindCameraError when the
    camera-frame depth is <= MIN_DEPTH.
    """
    cam = se3_inverse(pose).apply(point)
    z = float(cam[2])
    if z <= MIN_DEPTH:
        raise BehindCameraError(f"point at camera depth {z:.3e}")
    u = intr.fx * cam[0] / z + intr.cx
    v = intr.fy * cam[1] / z + intr.cy
    return float(u), float(v), z


def yaw_rotation(angle: float) -> np.ndarray:
    """Rotation about the camera-down (+y) axis; positive turns right."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
