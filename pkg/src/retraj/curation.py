"""Cross-trajectory training-pair curation and the dataset container.

Training triples pair a clean render of a laterally offset trajectory
(source) with the clean recorded-trajectory render (target), conditioned on a
degraded render of the recorded trajectory. At inference the roles flip: the
recorded render becomes the source and a mildly degraded render of the offset
trajectory becomes the structural condition. Longitudinal mode instead splits
one long trajectory into front (source) and rear (target) segments.

Datasets are stored in a .pdt container: four tensors per triple
(source, condition, target, rel_poses) plus a manifest with one line per
triple: ``idx,scene_seed,delta,level,offset_bytes,F,H,W``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, tensor_offsets, write_container
from .errors import ContainerError, CurationError
from .geometry import Intrinsics, Pose, Trajectory, lateral_offset_trajectory, relative_pose
from .renderer import FidelityLevel, VideoClip, degrade_scene, render_clip
from .scene import (
    SUPPORTED_OFFSETS,
    GaussianScene,
    SceneParams,
    generate_scene,
    generate_trajectory,
)

INFERENCE_CONDITION_LEVEL = 1  # mild degrade standing in for extrapolation artifacts


@dataclass(frozen=True)
class TrainingTriple:
    source: VideoClip  # clean render of the offset trajectory
    condition: VideoClip  # degraded render of the recorded trajectory
    target: VideoClip  # clean render of the recorded trajectory
    rel_poses: tuple[Pose, ...]  # per-frame source->target transforms
    offset: float  # lateral offset in meters (0.0 in longitudinal/debug modes)
    condition_level: int
    scene_seed: int

    def __post_init__(self):
        dims = {c.frames.shape for c in (self.source, self.condition, self.target)}
        if len(dims) != 1:
            raise CurationError("source/condition/target clips must share dimensions")
        if len(self.rel_poses) != self.source.frame_count:
            raise CurationError("rel_poses length must equal the frame count")


@dataclass(frozen=True)
class InferencePair:
    source: VideoClip  # clean recorded-trajectory render
    condition: VideoClip  # mildly degraded render of the offset trajectory
    rel_poses: tuple[Pose, ...]  # recorded -> offset transforms


@dataclass(frozen=True)
class TripleDescriptor:
    idx: int
    scene_seed: int
    delta: float
    level: int
    offset_bytes: int
    frames: int
    height: int
    width: int

    def line(self) -> str:
        return (
            f"{self.idx},{self.scene_seed},{_fmt(self.delta)},{self.level},"
            f"{self.offset_bytes},{self.frames},{self.height},{self.width}"
        )

    @staticmethod
    def parse(line: str) -> "TripleDescriptor":
        parts = line.split(",")
        if len(parts) != 8:
            raise ContainerError(f"malformed descriptor line: {line!r}")
        return TripleDescriptor(
            idx=int(parts[0]),
            scene_seed=int(parts[1]),
            delta=float(parts[2]),
            level=int(parts[3]),
            offset_bytes=int(parts[4]),
            frames=int(parts[5]),
            height=int(parts[6]),
            width=int(parts[7]),
        )


@dataclass
class DatasetManifest:
    descriptors: list[TripleDescriptor]
    config_hash: str
    config_text: str
    mode: str

    @property
    def triple_count(self) -> int:
        return len(self.descriptors)

    def counts_per_offset(self) -> dict[float, int]:
        counts: dict[float, int] = {}
        for d in self.descriptors:
            counts[d.delta] = counts.get(d.delta, 0) + 1
        return counts


@dataclass(frozen=True)
class DatasetConfig:
    """Everything needed to rebuild a dataset deterministically."""

    out_path: str
    scene_count: int = 4
    base_seed: int = 0
    offsets: tuple[float, ...] = SUPPORTED_OFFSETS  # magnitudes; signed pairs derived
    levels: tuple[int, ...] = (1, 2, 3)
    mode: str = "lateral"  # or "longitudinal"
    frames: int = 8
    height: int = 32
    width: int = 48
    splat_count: int = 2000
    speed: float = 0.5
    curvature: float = 0.0

    def __post_init__(self):
        if self.scene_count < 1:
            raise CurationError("scene count must be >= 1")
        if self.mode not in ("lateral", "longitudinal"):
            raise CurationError(f"unknown curation mode {self.mode!r}")
        if any(lv not in (1, 2, 3) for lv in self.levels):
            raise CurationError("condition levels must come from {1,2,3}")

    def scene_params(self) -> SceneParams:
        return SceneParams(
            splat_count=self.splat_count,
            trajectory_length=self.frames,
            speed=self.speed,
            curvature=self.curvature,
        )

    def intrinsics(self) -> Intrinsics:
        return make_intrinsics(self.width, self.height)

    def signed_offsets(self) -> list[float]:
        return [s * m for m in self.offsets for s in (1.0, -1.0)]

    def canonical_text(self) -> str:
        fields_ = {
            "mode": self.mode,
            "scene_count": self.scene_count,
            "base_seed": self.base_seed,
            "offsets": ",".join(_fmt(o) for o in self.offsets),
            "levels": ",".join(str(lv) for lv in self.levels),
            "frames": self.frames,
            "height": self.height,
            "width": self.width,
            "splat_count": self.splat_count,
            "speed": _fmt(self.speed),
            "curvature": _fmt(self.curvature),
        }
        return "".join(f"{k} = {v}\n" for k, v in sorted(fields_.items()))


def make_intrinsics(width: int, height: int) -> Intrinsics:
    """Default pinhole camera for a given resolution (~62 deg horizontal FOV)."""
    fx = 5.0 * width / 6.0
    return Intrinsics(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0, width=width, height=height)


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _check_offset_in_bounds(scene: GaussianScene, traj: Trajectory) -> None:
    for pose in traj.poses:
        if np.any(pose.translation < scene.bounds_min) or np.any(
            pose.translation > scene.bounds_max
        ):
            raise CurationError("offset trajectory leaves the scene bounds")


def _relative_poses(src: Trajectory, tgt: Trajectory) -> tuple[Pose, ...]:
    return tuple(relative_pose(s, t) for s, t in zip(src.poses, tgt.poses))


def build_training_triple(
    scene: GaussianScene,
    recorded_traj: Trajectory,
    intr: Intrinsics,
    delta: float,
    level: FidelityLevel,
    seed: int,
    allowed_offsets: tuple[float, ...] = SUPPORTED_OFFSETS,
    allow_zero_offset: bool = False,
) -> TrainingTriple:
    """Curate one training triple for a lateral offset ``delta``."""
    if level.level == 0:
        raise CurationError("training conditions must be degraded (level in {1,2,3})")
    if delta == 0.0:
        if not allow_zero_offset:
            raise CurationError("zero offset is only permitted in debug mode")
    elif abs(delta) not in allowed_offsets:
        raise CurationError(f"offset {delta} not in supported set {allowed_offsets}")

    src_traj = lateral_offset_trajectory(recorded_traj, delta)
    _check_offset_in_bounds(scene, src_traj)
    source = render_clip(scene, src_traj, intr)
    condition = render_clip(degrade_scene(scene, level, seed), recorded_traj, intr)
    target = render_clip(scene, recorded_traj, intr)
    return TrainingTriple(
        source=source,
        condition=condition,
        target=target,
        rel_poses=_relative_poses(src_traj, recorded_traj),
        offset=delta,
        condition_level=level.level,
        scene_seed=scene.seed,
    )


def build_inference_pair(
    scene: GaussianScene,
    recorded_traj: Trajectory,
    intr: Intrinsics,
    delta: float,
    allowed_offsets: tuple[float, ...] = SUPPORTED_OFFSETS,
    degrade_source: bool = False,
) -> InferencePair:
    """Curate the inference-time inputs for generating an offset trajectory.

    ``degrade_source`` swaps the clean source for a level-1 degraded render of
    the recorded trajectory (the source-mismatch study arm).
    """
    if delta != 0.0 and abs(delta) not in allowed_offsets:
        raise CurationError(f"offset {delta} not in supported set {allowed_offsets}")
    offset_traj = lateral_offset_trajectory(recorded_traj, delta)
    _check_offset_in_bounds(scene, offset_traj)
    mild = FidelityLevel.preset(INFERENCE_CONDITION_LEVEL)
    if degrade_source:
        source = render_clip(degrade_scene(scene, mild, scene.seed ^ 0xA5), recorded_traj, intr)
    else:
        source = render_clip(scene, recorded_traj, intr)
    condition = render_clip(degrade_scene(scene, mild, scene.seed), offset_traj, intr)
    return InferencePair(
        source=source,
        condition=condition,
        rel_poses=_relative_poses(recorded_traj, offset_traj),
    )


def _rel_to_array(rel_poses: tuple[Pose, ...]) -> np.ndarray:
    return np.stack([p.matrix3x4() for p in rel_poses]).astype(np.float32)


def build_dataset(config: DatasetConfig) -> DatasetManifest:
    """Iterate scenes x offsets x levels, write the container, return the manifest.

    Deterministic in ``config``: rebuilding with the same config produces a
    byte-identical file.
    """
    params = config.scene_params()
    intr = config.intrinsics()
    tensors: list[np.ndarray] = []
    rows: list[tuple[int, float, int]] = []  # (scene_seed, delta, level)

    for i in range(config.scene_count):
        seed = config.base_seed + i
        if config.mode == "lateral":
            scene = generate_scene(seed, params)
            traj = generate_trajectory(seed, params)
            target = render_clip(scene, traj, intr)
            conditions = {
                lv: render_clip(degrade_scene(scene, FidelityLevel.preset(lv), seed), traj, intr)
                for lv in config.levels
            }
            for delta in config.signed_offsets():
                src_traj = lateral_offset_trajectory(traj, delta)
                _check_offset_in_bounds(scene, src_traj)
                source = render_clip(scene, src_traj, intr)
                rel = _rel_to_array(_relative_poses(src_traj, traj))
                for lv in config.levels:
                    tensors.extend(
                        [source.frames, conditions[lv].frames, target.frames, rel]
                    )
                    rows.append((seed, delta, lv))
        else:
            long_params = params.with_frames(2 * config.frames)
            scene = generate_scene(seed, long_params)
            traj = generate_trajectory(seed, long_params)
            front = Trajectory(traj.poses[: config.frames], traj.frame_rate)
            rear = Trajectory(traj.poses[config.frames :], traj.frame_rate)
            source = render_clip(scene, front, intr)
            target = render_clip(scene, rear, intr)
            rel = _rel_to_array(_relative_poses(front, rear))
            for lv in config.levels:
                cond = render_clip(
                    degrade_scene(scene, FidelityLevel.preset(lv), seed), rear, intr
                )
                tensors.extend([source.frames, cond.frames, target.frames, rel])
                rows.append((seed, 0.0, lv))

    offsets = tensor_offsets(tensors)
    descriptors = [
        TripleDescriptor(
            idx=i,
            scene_seed=seed,
            delta=delta,
            level=lv,
            offset_bytes=offsets[4 * i],
            frames=config.frames,
            height=config.height,
            width=config.width,
        )
        for i, (seed, delta, lv) in enumerate(rows)
    ]
    config_text = config.canonical_text()
    config_hash = hashlib.sha256(config_text.encode("utf-8")).hexdigest()
    manifest = DatasetManifest(descriptors, config_hash, config_text, config.mode)
    write_container(config.out_path, tensors, render_manifest_text(manifest))
    return manifest


def render_manifest_text(manifest: DatasetManifest) -> str:
    lines = ["# pdt-dataset v1", f"# config_hash = {manifest.config_hash}"]
    lines += [f"# cfg {ln}" for ln in manifest.config_text.strip().split("\n")]
    for delta, count in sorted(manifest.counts_per_offset().items()):
        lines.append(f"# count {_fmt(delta)} = {count}")
    lines += [d.line() for d in manifest.descriptors]
    return "\n".join(lines) + "\n"


def parse_manifest_text(text: str) -> DatasetManifest:
    descriptors = []
    config_hash = ""
    cfg_lines = []
    mode = "lateral"
    for line in text.strip().split("\n"):
        if line.startswith("# config_hash = "):
            config_hash = line.split("= ", 1)[1]
        elif line.startswith("# cfg "):
            cfg_lines.append(line[len("# cfg ") :])
            if line.startswith("# cfg mode = "):
                mode = line.split("= ", 1)[1]
        elif line.startswith("#"):
            continue
        else:
            descriptors.append(TripleDescriptor.parse(line))
    return DatasetManifest(descriptors, config_hash, "\n".join(cfg_lines) + "\n", mode)


@dataclass
class LoadedDataset:
    """Dataset pulled fully into memory (desk scale keeps this small)."""

    sources: np.ndarray  # (N, F, 3, H, W) float32
    conditions: np.ndarray
    targets: np.ndarray
    rel_poses: np.ndarray  # (N, F, 3, 4) float32
    manifest: DatasetManifest

    def __len__(self) -> int:
        return self.sources.shape[0]


def load_dataset(path) -> LoadedDataset:
    tensors, text = read_container(path)
    manifest = parse_manifest_text(text)
    n = manifest.triple_count
    if len(tensors) != 4 * n:
        raise ContainerError(
            f"tensor count {len(tensors)} does not match {n} descriptors"
        )
    if n == 0:
        raise ContainerError("dataset container holds no triples")
    return LoadedDataset(
        sources=np.stack(tensors[0::4]),
        conditions=np.stack(tensors[1::4]),
        targets=np.stack(tensors[2::4]),
        rel_poses=np.stack(tensors[3::4]),
        manifest=manifest,
    )
