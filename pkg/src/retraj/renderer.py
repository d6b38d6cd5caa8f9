"""Deterministic software splat renderer and the fidelity-degradation ladder.

Each splat is drawn as a screen-space isotropic Gaussian footprint with
sigma = fx * mean(scale) / depth pixels, truncated at 3 sigma, composited
back-to-front (painter's order) over a constant background. This is a
deliberate simplification of full anisotropic EWA splatting: at desk scale
the only phenomena that matter are parallax, occlusion, and blur.

The degradation ladder emulates under-converged reconstructions: lower
fidelity keeps a random subset of splats, inflates their extent, and jitters
colors, producing progressively blurrier and sparser renders of the same
scene.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParamsError
from .geometry import Intrinsics, Trajectory, se3_inverse
from .scene import GaussianScene, _rng

MIN_SIGMA_PX = 0.3  # keeps sub-pixel splats visible
DEPTH_EPS = 1e-4

# (keep_fraction, scale_inflation) per level; level 0 is the converged scene.
DEGRADE_LADDER = {
    0: (1.0, 1.0),
    1: (0.6, 1.5),
    2: (0.35, 2.2),
    3: (0.15, 3.0),
}
COLOR_JITTER_PER_LEVEL = 0.02


@dataclass(frozen=True)
class VideoClip:
    """frames: (F, 3, H, W) float32 in [0,1]."""

    frames: np.ndarray

    def __post_init__(self):
        frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if frames.ndim != 4 or frames.shape[1] != 3:
            raise InvalidParamsError(f"clip must be (F,3,H,W), got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise InvalidParamsError("clip contains non-finite values")
        if frames.min() < 0.0 or frames.max() > 1.0:
            raise InvalidParamsError("clip values must lie in [0,1]")
        object.__setattr__(self, "frames", frames)

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[2]

    @property
    def width(self) -> int:
        return self.frames.shape[3]


@dataclass(frozen=True)
class FidelityLevel:
    """Degradation knob: level 0 = converged, 3 = most degraded."""

    level: int
    keep_fraction: float
    scale_inflation: float

    def __post_init__(self):
        if self.level not in (0, 1, 2, 3):
            raise InvalidParamsError("level must be in {0,1,2,3}")
        if not (0.0 < self.keep_fraction <= 1.0):
            raise InvalidParamsError("keep_fraction must lie in (0,1]")
        if self.scale_inflation < 1.0:
            raise InvalidParamsError("scale_inflation must be >= 1")
        if self.level == 0 and (self.keep_fraction != 1.0 or self.scale_inflation != 1.0):
            raise InvalidParamsError("level 0 must keep everything unchanged")

    @staticmethod
    def preset(level: int) -> "FidelityLevel":
        keep, inflate = DEGRADE_LADDER[level]
        return FidelityLevel(level, keep, inflate)


def degrade_scene(scene: GaussianScene, level: FidelityLevel, seed: int) -> GaussianScene:
    """Emulate an under-converged reconstruction of ``scene``.

    Keeps a deterministic keep_fraction subset of splats, inflates their
    scales, and jitters colors. Level 0 returns the scene unchanged.
    """
    if level.level == 0:
        return scene
    rng = _rng((seed << 2) ^ level.level)
    n = len(scene)
    n_keep = max(1, int(round(n * level.keep_fraction)))
    keep = np.sort(rng.choice(n, size=n_keep, replace=False))
    jitter = rng.uniform(
        -COLOR_JITTER_PER_LEVEL * level.level,
        COLOR_JITTER_PER_LEVEL * level.level,
        (n_keep, 3),
    )
    return GaussianScene(
        centers=scene.centers[keep],
        scales=scene.scales[keep] * level.scale_inflation,
        colors=np.clip(scene.colors[keep] + jitter, 0.0, 1.0),
        opacities=scene.opacities[keep],
        background=scene.background,
        bounds_min=scene.bounds_min,
        bounds_max=scene.bounds_max,
        seed=scene.seed,
    )


def render_frame(scene: GaussianScene, pose, intr: Intrinsics) -> np.ndarray:
    """Render one (3, H, W) float32 frame."""
    h, w = intr.height, intr.width
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = scene.background

    inv = se3_inverse(pose)
    cam = scene.centers @ inv.rotation.T + inv.translation
    z = cam[:, 2]
    visible = z > DEPTH_EPS
    if np.any(visible):
        idx = np.nonzero(visible)[0]
        zi = z[idx]
        u = intr.fx * cam[idx, 0] / zi + intr.cx
        v = intr.fy * cam[idx, 1] / zi + intr.cy
        sigma = np.maximum(intr.fx * scene.scales[idx].mean(axis=1) / zi, MIN_SIGMA_PX)
        radius = 3.0 * sigma
        on_screen = (u + radius >= 0) & (u - radius < w) & (v + radius >= 0) & (v - radius < h)
        idx, u, v, zi, sigma, radius = (
            idx[on_screen],
            u[on_screen],
            v[on_screen],
            zi[on_screen],
            sigma[on_screen],
            radius[on_screen],
        )
        # Far-to-near painter's order; stable sort keeps ties deterministic.
        order = np.argsort(-zi, kind="stable")
        colors = scene.colors[idx]
        opac = scene.opacities[idx]
        for k in order:
            x0 = max(int(np.floor(u[k] - radius[k])), 0)
            x1 = min(int(np.ceil(u[k] + radius[k])) + 1, w)
            y0 = max(int(np.floor(v[k] - radius[k])), 0)
            y1 = min(int(np.ceil(v[k] + radius[k])) + 1, h)
            if x0 >= x1 or y0 >= y1:
                continue
            xs = np.arange(x0, x1, dtype=np.float64) - u[k]
            ys = np.arange(y0, y1, dtype=np.float64) - v[k]
            d2 = ys[:, None] ** 2 + xs[None, :] ** 2
            s2 = sigma[k] * sigma[k]
            alpha = opac[k] * np.exp(-0.5 * d2 / s2)
            alpha[d2 > 9.0 * s2] = 0.0
            a = alpha[:, :, None]
            img[y0:y1, x0:x1] = a * colors[k] + (1.0 - a) * img[y0:y1, x0:x1]
    return np.clip(img, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)


def render_clip(scene: GaussianScene, traj: Trajectory, intr: Intrinsics) -> VideoClip:
    """Render the trajectory into an (F, 3, H, W) clip. Pure and deterministic."""
    frames = np.stack([render_frame(scene, pose, intr) for pose in traj.poses])
    return VideoClip(frames)


def gradient_energy(clip: VideoClip) -> float:
    """Mean absolute image gradient over all frames; a sharpness proxy."""
    f = clip.frames.astype(np.float64)
    gx = np.abs(np.diff(f, axis=3)).mean()
    gy = np.abs(np.diff(f, axis=2)).mean()
    return float(gx + gy)


def frame_to_ppm(frame: np.ndarray) -> bytes:
    """Encode one (3, H, W) [0,1] frame as a binary portable pixmap (P6)."""
    h, w = frame.shape[1], frame.shape[2]
    rgb = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + rgb.transpose(1, 2, 0).tobytes()


def write_clip_ppm(clip: VideoClip, directory, prefix: str = "frame") -> list:
    """Dump every frame of ``clip`` as <prefix>_000.ppm etc.; returns paths."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(clip.frame_count):
        path = directory / f"{prefix}_{i:03d}.ppm"
        path.write_bytes(frame_to_ppm(clip.frames[i]))
        paths.append(path)
    return paths
