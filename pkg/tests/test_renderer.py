"""Splat renderer: projection agreement, parallax, occlusion, degradation."""

import numpy as np
import pytest

from retraj.geometry import Intrinsics, Pose, Trajectory, project
from retraj.renderer import (
    FidelityLevel,
    VideoClip,
    degrade_scene,
    frame_to_ppm,
    gradient_energy,
    render_clip,
    render_frame,
)
from retraj.scene import GaussianScene, SceneParams, generate_scene, generate_trajectory


def intr(width=96, height=64, fx=80.0):
    return Intrinsics(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0, width=width, height=height)


def single_splat_scene(center, scale=0.05, color=(1.0, 0.0, 0.0), opacity=1.0, seed=0):
    center = np.asarray(center, dtype=float)
    return GaussianScene(
        centers=center[None, :],
        scales=np.full((1, 3), scale),
        colors=np.array([color], dtype=float),
        opacities=np.array([opacity]),
        background=np.zeros(3),
        bounds_min=center - 50,
        bounds_max=center + 50,
        seed=seed,
    )


def brightest_pixel(frame: np.ndarray) -> tuple[int, int]:
    lum = frame.sum(axis=0)
    flat = int(np.argmax(lum))
    return flat // lum.shape[1], flat % lum.shape[1]  # (row, col)


class TestRenderClip:
    def test_zero_opacity_gives_background(self):
        scene = generate_scene(1, SceneParams(splat_count=200, trajectory_length=2))
        scene = GaussianScene(
            centers=scene.centers,
            scales=scene.scales,
            colors=scene.colors,
            opacities=np.full(len(scene), 1e-12),
            background=scene.background,
            bounds_min=scene.bounds_min,
            bounds_max=scene.bounds_max,
            seed=scene.seed,
        )
        traj = generate_trajectory(1, SceneParams(splat_count=200, trajectory_length=2))
        clip = render_clip(scene, traj, intr())
        bg = scene.background.astype(np.float32)
        assert np.allclose(clip.frames, bg[None, :, None, None], atol=1e-6)

    def test_brightest_pixel_matches_projection(self):
        k = intr()
        point = np.array([0.4, -0.2, 8.0])
        scene = single_splat_scene(point)
        frame = render_frame(scene, Pose.identity(), k)
        u, v, _ = project(point, Pose.identity(), k)
        row, col = brightest_pixel(frame)
        assert abs(col - u) <= 0.5 + 1e-9
        assert abs(row - v) <= 0.5 + 1e-9

    def test_deterministic(self):
        params = SceneParams(splat_count=300, trajectory_length=3)
        scene = generate_scene(4, params)
        traj = generate_trajectory(4, params)
        a = render_clip(scene, traj, intr())
        b = render_clip(scene, traj, intr())
        assert np.array_equal(a.frames, b.frames)

    def test_output_range(self):
        params = SceneParams(splat_count=300, trajectory_length=3)
        clip = render_clip(generate_scene(5, params), generate_trajectory(5, params), intr())
        assert clip.frames.min() >= 0.0 and clip.frames.max() <= 1.0

    def test_behind_camera_splats_skipped(self):
        scene = single_splat_scene([0.0, 0.0, -5.0])
        frame = render_frame(scene, Pose.identity(), intr())
        assert np.allclose(frame, 0.0)


class TestParallax:
    def test_offset_displacement_ratio(self):
        k = intr(width=192, height=64, fx=100.0)
        point = np.array([0.0, 0.0, 20.0])
        scene = single_splat_scene(point, scale=0.08)
        cols = []
        for delta in (0.0, 1.0, 2.0):
            pose = Pose(np.eye(3), np.array([delta, 0.0, 0.0]))
            frame = render_frame(scene, pose, k)
            cols.append(brightest_pixel(frame)[1])
        d1 = cols[1] - cols[0]
        d2 = cols[2] - cols[0]
        assert abs(d2 - 2 * d1) <= 1.0
        assert d1 < 0  # camera right -> image left


class TestOcclusion:
    def test_near_splat_wins(self):
        k = intr()
        near = np.array([0.0, 0.0, 5.0])
        far = np.array([0.0, 0.0, 15.0])
        scene = GaussianScene(
            centers=np.stack([far, near]),
            scales=np.full((2, 3), 0.3),
            colors=np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]),
            opacities=np.array([1.0, 1.0]),
            background=np.zeros(3),
            bounds_min=np.array([-50.0, -50.0, -50.0]),
            bounds_max=np.array([50.0, 50.0, 50.0]),
            seed=0,
        )
        frame = render_frame(scene, Pose.identity(), k)
        center_px = frame[:, 32, 48]
        assert center_px[0] > 0.95  # near red dominates
        assert center_px[1] < 0.05


class TestDegrade:
    def _scene(self):
        return generate_scene(6, SceneParams(splat_count=2000, trajectory_length=2))

    def test_level0_identity(self):
        scene = self._scene()
        assert degrade_scene(scene, FidelityLevel.preset(0), 9) is scene

    def test_keep_fraction_count(self):
        scene = self._scene()
        out = degrade_scene(scene, FidelityLevel(1, 0.5, 1.5), 9)
        assert len(out) == 1000

    def test_gradient_energy_monotone(self):
        params = SceneParams(splat_count=1500, trajectory_length=2)
        scene = generate_scene(7, params)
        traj = generate_trajectory(7, params)
        k = intr(width=48, height=32, fx=40.0)
        energies = []
        for level in range(4):
            degraded = degrade_scene(scene, FidelityLevel.preset(level), 7)
            energies.append(gradient_energy(render_clip(degraded, traj, k)))
        assert energies[0] > energies[1] > energies[2] > energies[3]

    def test_deterministic(self):
        scene = self._scene()
        a = degrade_scene(scene, FidelityLevel.preset(2), 3)
        b = degrade_scene(scene, FidelityLevel.preset(2), 3)
        assert np.array_equal(a.centers, b.centers)
        assert np.array_equal(a.colors, b.colors)

    def test_level0_requires_identity_knobs(self):
        with pytest.raises(Exception):
            FidelityLevel(0, 0.5, 1.0)


def test_video_clip_validation():
    with pytest.raises(Exception):
        VideoClip(np.full((2, 3, 4, 4), 1.5, dtype=np.float32))
    with pytest.raises(Exception):
        VideoClip(np.zeros((2, 4, 4, 4), dtype=np.float32))


def test_ppm_export():
    frame = np.zeros((3, 2, 3), dtype=np.float32)
    frame[0, 0, 0] = 1.0
    data = frame_to_ppm(frame)
    assert data.startswith(b"P6\n3 2\n255\n")
    body = data[len(b"P6\n3 2\n255\n") :]
    assert len(body) == 2 * 3 * 3
    assert body[0] == 255 and body[1] == 0
