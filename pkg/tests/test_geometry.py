"""Pose algebra, offsetting, and projection, checked against 4x4 matrix oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retraj.errors import BehindCameraError, InvalidPoseError
from retraj.geometry import (
    Intrinsics,
    Pose,
    Trajectory,
    lateral_offset_trajectory,
    project,
    relative_pose,
    se3_compose,
    se3_inverse,
    yaw_rotation,
)


def random_pose(rng: np.random.Generator) -> Pose:
    # Rotation from a random axis-angle; always orthonormal with det +1.
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-np.pi, np.pi)
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    rot = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
    return Pose(rot, rng.uniform(-10, 10, 3))


def translate(x, y, z) -> Pose:
    return Pose(np.eye(3), np.array([x, y, z], dtype=float))


class TestInverse:
    def test_identity(self):
        inv = se3_inverse(Pose.identity())
        assert np.allclose(inv.matrix(), np.eye(4))

    def test_pure_translation(self):
        inv = se3_inverse(translate(1, 2, 3))
        assert np.allclose(inv.translation, [-1, -2, -3])
        assert np.allclose(inv.rotation, np.eye(3))

    def test_round_trip_matches_matrix_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            pose = random_pose(rng)
            composed = se3_compose(pose, se3_inverse(pose)).matrix()
            assert np.max(np.abs(composed - np.eye(4))) <= 1e-6
            # oracle: numpy 4x4 inverse
            assert np.allclose(se3_inverse(pose).matrix(), np.linalg.inv(pose.matrix()), atol=1e-9)

    def test_rejects_non_orthonormal(self):
        with pytest.raises(InvalidPoseError):
            Pose(np.eye(3) * 1.01, np.zeros(3))

    def test_rejects_reflection(self):
        refl = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(InvalidPoseError):
            Pose(refl, np.zeros(3))


class TestCompose:
    def test_identity_neutral(self):
        rng = np.random.default_rng(3)
        pose = random_pose(rng)
        assert np.allclose(se3_compose(Pose.identity(), pose).matrix(), pose.matrix())

    def test_translations_add(self):
        out = se3_compose(translate(1, 0, 0), translate(0, 2, 0))
        assert np.allclose(out.translation, [1, 2, 0])

    def test_associativity_against_matmul(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            a, b, c = (random_pose(rng) for _ in range(3))
            left = se3_compose(se3_compose(a, b), c).matrix()
            right = se3_compose(a, se3_compose(b, c)).matrix()
            oracle = a.matrix() @ b.matrix() @ c.matrix()
            assert np.max(np.abs(left - right)) <= 1e-6
            assert np.allclose(left, oracle, atol=1e-9)


class TestRelativePose:
    def test_same_pose_gives_identity(self):
        rng = np.random.default_rng(5)
        pose = random_pose(rng)
        rel = relative_pose(pose, pose)
        assert np.max(np.abs(rel.matrix() - np.eye(4))) <= 1e-9

    def test_hand_computed_translation(self):
        # oracle: inv([I | +1 0 0]) @ I = [I | -1 0 0]
        rel = relative_pose(Pose.identity(), translate(1, 0, 0))
        assert np.allclose(rel.translation, [-1, 0, 0])

    def test_chain_property(self):
        rng = np.random.default_rng(13)
        for _ in range(30):
            a, b, c = (random_pose(rng) for _ in range(3))
            direct = relative_pose(a, c).matrix()
            chained = se3_compose(relative_pose(b, c), relative_pose(a, b)).matrix()
            assert np.max(np.abs(direct - chained)) <= 1e-6


class TestLateralOffset:
    def _traj(self, rng, n=6):
        return Trajectory(tuple(random_pose(rng) for _ in range(n)))

    def test_zero_offset_identity(self):
        rng = np.random.default_rng(17)
        traj = self._traj(rng)
        out = lateral_offset_trajectory(traj, 0.0)
        for a, b in zip(traj.poses, out.poses):
            assert np.array_equal(a.rotation, b.rotation)
            assert np.array_equal(a.translation, b.translation)

    def test_identity_rotation_moves_along_x(self):
        traj = Trajectory((Pose.identity(),))
        out = lateral_offset_trajectory(traj, 3.0)
        assert np.allclose(out.poses[0].translation, [3, 0, 0])

    @pytest.mark.parametrize("delta", [1.0, -1.0, 2.0, -2.0, 3.0, -3.0, 4.0, -4.0])
    def test_supported_offsets_shift_right_axis(self, delta):
        rng = np.random.default_rng(19)
        traj = self._traj(rng)
        out = lateral_offset_trajectory(traj, delta)
        for a, b in zip(traj.poses, out.poses):
            assert b.rotation is a.rotation  # bit-for-bit, same array
            assert np.allclose(b.translation - a.translation, delta * a.rotation[:, 0])

    def test_straight_trajectory_preserves_camera_frame_deltas(self):
        # Constant rotation: inter-frame deltas in camera coordinates are preserved.
        rot = yaw_rotation(0.3)
        poses = tuple(Pose(rot, np.array([0.1 * i, 0.0, 0.5 * i])) for i in range(5))
        traj = Trajectory(poses)
        out = lateral_offset_trajectory(traj, 2.0)
        for i in range(4):
            before = rot.T @ (poses[i + 1].translation - poses[i].translation)
            after = rot.T @ (out.poses[i + 1].translation - out.poses[i].translation)
            assert np.allclose(before, after, atol=1e-12)


class TestProject:
    def _intr(self):
        return Intrinsics(fx=100.0, fy=100.0, cx=64.0, cy=48.0, width=128, height=96)

    def test_optical_axis(self):
        u, v, z = project(np.array([0.0, 0.0, 10.0]), Pose.identity(), self._intr())
        assert (u, v, z) == (64.0, 48.0, 10.0)

    def test_lateral_shift_parallax(self):
        intr = self._intr()
        point = np.array([0.0, 0.0, 10.0])
        u0, _, _ = project(point, Pose.identity(), intr)
        u1, _, _ = project(point, translate(1, 0, 0), intr)
        # oracle: u = fx*(x - 1)/z + cx -> shift of -fx/z = -10 px
        assert u1 - u0 == pytest.approx(-10.0, abs=1e-9)

    @pytest.mark.parametrize("delta,depth", [(1, 5), (2, 10), (4, 20)])
    def test_parallax_formula(self, delta, depth):
        intr = self._intr()
        point = np.array([0.0, 0.0, float(depth)])
        u0, _, _ = project(point, Pose.identity(), intr)
        u1, _, _ = project(point, translate(delta, 0, 0), intr)
        assert (u1 - u0) == pytest.approx(-intr.fx * delta / depth, rel=1e-6)

    def test_behind_camera(self):
        with pytest.raises(BehindCameraError):
            project(np.array([0.0, 0.0, 0.0]), Pose.identity(), self._intr())


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_inverse_round_trip_property(seed):
    pose = random_pose(np.random.default_rng(seed))
    composed = se3_compose(pose, se3_inverse(pose)).matrix()
    assert np.max(np.abs(composed - np.eye(4))) <= 1e-6


def test_intrinsics_validation():
    with pytest.raises(Exception):
        Intrinsics(fx=-1, fy=1, cx=0, cy=0, width=10, height=10)
    with pytest.raises(Exception):
        Intrinsics(fx=1, fy=1, cx=20, cy=0, width=10, height=10)
