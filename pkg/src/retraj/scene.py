"""Procedural splat scenes and recorded trajectories.

Scenes mimic a road corridor: a textured ground plane, two wall bands, and
scattered pillar/box clusters near the walls. The layout keeps a clear band
around the trajectory so laterally offset cameras (up to +-4 m) stay in free
space while seeing strong parallax from ground texture, walls, and obstacles.

Generation is a pure function of (seed, params) using numpy's PCG64 generator,
so identical inputs give bit-identical scenes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidParamsError
from .geometry import Pose, Trajectory, yaw_rotation

# Lateral offsets the curation pipeline supports; scenes are sized so these
# always stay inside bounds.
SUPPORTED_OFFSETS = (1.0, 2.0, 3.0, 4.0)
CLEAR_BAND = 5.0  # half-width (m) kept free of obstacles around the lane

GROUND_Y = 1.6  # camera rides 1.6 m above the ground plane (+y is down)


@dataclass(frozen=True)
class Splat:
    """One colored anisotropic Gaussian primitive."""

    center: np.ndarray  # (3,) meters
    scale: np.ndarray  # (3,) per-axis std dev, meters
    color: np.ndarray  # (3,) rgb in [0,1]
    opacity: float  # (0,1]


@dataclass(frozen=True)
class GaussianScene:
    """A set of splats plus background color, bounds, and the generating seed."""

    centers: np.ndarray  # (n,3) float64
    scales: np.ndarray  # (n,3) float64
    colors: np.ndarray  # (n,3) float64 in [0,1]
    opacities: np.ndarray  # (n,) float64 in (0,1]
    background: np.ndarray  # (3,)
    bounds_min: np.ndarray  # (3,)
    bounds_max: np.ndarray  # (3,)
    seed: int

    def __post_init__(self):
        n = self.centers.shape[0]
        if n < 1:
            raise InvalidParamsError("scene must contain at least one splat")
        if np.any(self.scales <= 0):
            raise InvalidParamsError("splat scales must be positive")
        if np.any(self.opacities <= 0) or np.any(self.opacities > 1):
            raise InvalidParamsError("opacities must lie in (0,1]")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise InvalidParamsError("colors must lie in [0,1]")
        inside = np.all(
            (self.centers >= self.bounds_min) & (self.centers <= self.bounds_max)
        )
        if not inside:
            raise InvalidParamsError("all splat centers must lie inside bounds")

    def __len__(self) -> int:
        return self.centers.shape[0]

    def splat(self, i: int) -> Splat:
        return Splat(
            self.centers[i].copy(),
            self.scales[i].copy(),
            self.colors[i].copy(),
            float(self.opacities[i]),
        )


@dataclass(frozen=True)
class SceneParams:
    """Knobs for procedural scenes and recorded trajectories."""

    splat_count: int = 2000
    corridor_width: float = 16.0
    corridor_length: float = 40.0
    object_density: float = 0.4  # clusters per meter of corridor
    trajectory_length: int = 8  # frames
    speed: float = 0.5  # meters per frame
    curvature: float = 0.0  # yaw radians per frame

    def __post_init__(self):
        if self.splat_count < 1:
            raise InvalidParamsError("splat_count must be positive")
        if self.corridor_width <= 2 * CLEAR_BAND:
            raise InvalidParamsError(
                f"corridor_width must exceed {2 * CLEAR_BAND} m to fit offsets"
            )
        if self.corridor_length <= 0 or self.trajectory_length < 1:
            raise InvalidParamsError("corridor_length and trajectory_length must be positive")
        if self.speed <= 0:
            raise InvalidParamsError("speed must be positive")

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        half = self.corridor_width / 2 + 2.0
        lo = np.array([-half, -4.0, -4.0])
        hi = np.array([half, 3.0, self.corridor_length + 4.0])
        return lo, hi

    def with_frames(self, frames: int) -> "SceneParams":
        return replace(self, trajectory_length=frames)


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def generate_scene(seed: int, params: SceneParams) -> GaussianScene:
    """Build the corridor scene deterministically from (seed, params)."""
    rng = _rng(seed)
    lo, hi = params.bounds()
    n = params.splat_count
    n_ground = int(0.4 * n)
    n_wall = int(0.3 * n)
    n_obj = n - n_ground - n_wall

    length = params.corridor_length
    half_w = params.corridor_width / 2

    # Ground: checkerboard texture plus per-splat color noise.
    gx = rng.uniform(-half_w, half_w, n_ground)
    gz = rng.uniform(-2.0, length + 2.0, n_ground)
    gy = np.full(n_ground, GROUND_Y) + rng.uniform(-0.02, 0.02, n_ground)
    checker = ((np.floor(gx / 2.0) + np.floor(gz / 2.0)) % 2).astype(np.float64)
    base = 0.35 + 0.3 * checker + rng.uniform(-0.06, 0.06, n_ground)
    g_colors = np.stack([base, base * 0.95, base * 0.9], axis=1)
    g_centers = np.stack([gx, gy, gz], axis=1)
    g_scales = np.stack(
        [
            rng.uniform(0.18, 0.32, n_ground),
            rng.uniform(0.03, 0.06, n_ground),
            rng.uniform(0.18, 0.32, n_ground),
        ],
        axis=1,
    )
    g_opac = rng.uniform(0.8, 1.0, n_ground)

    # Walls: vertical bands at +-half_w with color stripes along z so lateral
    # motion produces unmistakable photometric change.
    side = np.where(rng.uniform(size=n_wall) < 0.5, -1.0, 1.0)
    wz = rng.uniform(-2.0, length + 2.0, n_wall)
    wy = rng.uniform(-2.2, GROUND_Y, n_wall)
    wx = side * half_w + rng.uniform(-0.15, 0.15, n_wall)
    palette = np.array(
        [
            [0.75, 0.35, 0.30],
            [0.30, 0.55, 0.75],
            [0.80, 0.70, 0.30],
            [0.40, 0.65, 0.40],
            [0.60, 0.40, 0.65],
        ]
    )
    stripe = (np.floor(wz / 3.0).astype(int)) % len(palette)
    w_colors = palette[stripe] + rng.uniform(-0.05, 0.05, (n_wall, 3))
    w_centers = np.stack([wx, wy, wz], axis=1)
    w_scales = np.stack(
        [
            rng.uniform(0.04, 0.08, n_wall),
            rng.uniform(0.2, 0.4, n_wall),
            rng.uniform(0.2, 0.4, n_wall),
        ],
        axis=1,
    )
    w_opac = rng.uniform(0.85, 1.0, n_wall)

    # Obstacles: pillar clusters between the clear band and the walls.
    n_clusters = max(1, int(round(params.object_density * length)))
    cl_side = np.where(rng.uniform(size=n_clusters) < 0.5, -1.0, 1.0)
    cl_x = cl_side * rng.uniform(CLEAR_BAND + 0.5, half_w - 0.6, n_clusters)
    cl_z = rng.uniform(1.0, length + 1.0, n_clusters)
    cl_h = rng.uniform(0.8, 2.4, n_clusters)
    cl_color = rng.uniform(0.15, 0.95, (n_clusters, 3))
    which = rng.integers(0, n_clusters, n_obj)
    oy = GROUND_Y - rng.uniform(0.0, cl_h[which])
    ox = cl_x[which] + rng.normal(0.0, 0.18, n_obj)
    oz = cl_z[which] + rng.normal(0.0, 0.18, n_obj)
    o_centers = np.stack([ox, oy, oz], axis=1)
    o_scales = np.tile(rng.uniform(0.1, 0.2, n_obj)[:, None], (1, 3))
    o_colors = cl_color[which] + rng.uniform(-0.04, 0.04, (n_obj, 3))
    o_opac = rng.uniform(0.7, 1.0, n_obj)

    centers = np.concatenate([g_centers, w_centers, o_centers])
    scales = np.concatenate([g_scales, w_scales, o_scales])
    colors = np.clip(np.concatenate([g_colors, w_colors, o_colors]), 0.0, 1.0)
    opacities = np.concatenate([g_opac, w_opac, o_opac])
    centers = np.clip(centers, lo + 1e-6, hi - 1e-6)

    return GaussianScene(
        centers=centers,
        scales=scales,
        colors=colors,
        opacities=opacities,
        background=np.array([0.70, 0.78, 0.90]),
        bounds_min=lo,
        bounds_max=hi,
        seed=seed,
    )


def generate_trajectory(seed: int, params: SceneParams) -> Trajectory:
    """Forward-moving recorded trajectory with optional gentle yaw curvature.

    The camera starts near the corridor entrance at lane center, 1.6 m above
    ground, heading +z. Raises InvalidParamsError if any pose (or any
    supported lateral offset of it) would leave the scene bounds.
    """
    rng = _rng(seed ^ 0x5EED)
    lo, hi = params.bounds()
    start_z = 1.0 + rng.uniform(0.0, 0.5)
    yaw = rng.uniform(-0.02, 0.02)
    pos = np.array([rng.uniform(-0.3, 0.3), 0.0, start_z])
    poses = []
    for _ in range(params.trajectory_length):
        rot = yaw_rotation(yaw)
        poses.append(Pose(rot, pos.copy()))
        yaw += params.curvature
        pos = pos + params.speed * rot[:, 2]

    max_off = max(SUPPORTED_OFFSETS)
    for pose in poses:
        for sign in (-1.0, 1.0):
            p = pose.translation + sign * max_off * pose.rotation[:, 0]
            if np.any(p < lo) or np.any(p > hi):
                raise InvalidParamsError(
                    "trajectory (or its supported lateral offsets) exits scene bounds; "
                    "reduce curvature/speed or enlarge the corridor"
                )
    return Trajectory(tuple(poses), frame_rate=10.0)


def dump_splats_csv(scene: GaussianScene) -> str:
    """Debug CSV: one row per splat (center, scale, color, opacity)."""
    lines = ["cx,cy,cz,sx,sy,sz,r,g,b,opacity"]
    for c, s, col, op in zip(scene.centers, scene.scales, scene.colors, scene.opacities):
        vals = [*c, *s, *col, op]
        lines.append(",".join(f"{v:.9g}" for v in vals))
    return "\n".join(lines) + "\n"
