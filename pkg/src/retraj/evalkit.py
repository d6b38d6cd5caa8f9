"""Evaluation against synthetic ground truth.

Because every scene is procedural, the true render of any offset trajectory
is available: fidelity is scored as PSNR/MSE against it, and camera accuracy
as |estimated - requested| lateral offset, where the estimate comes from a
photometric grid search over ground-truth renders (the stand-in for running a
camera-pose estimator on generated video). Temporal consistency is the mean
adjacent-frame correlation.

Held-out protocol: scene seeds >= 10,000 are reserved for evaluation; training
datasets use small seeds, so the two never overlap.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import flow
from .curation import InferencePair, build_inference_pair, make_intrinsics
from .errors import ConfigError
from .geometry import Intrinsics, Trajectory, lateral_offset_trajectory
from .renderer import VideoClip, render_clip
from .scene import GaussianScene, SceneParams, generate_scene, generate_trajectory
from .trainkit import Checkpoint, derive_seed, model_from_checkpoint

PSNR_CAP_DB = 99.0
HELD_OUT_SEED_FLOOR = 10_000
DEFAULT_GRID = tuple(np.round(np.arange(-5.0, 5.0 + 1e-9, 0.25), 6).tolist())


def mse(a: VideoClip, b: VideoClip) -> float:
    if a.frames.shape != b.frames.shape:
        raise ConfigError(f"clip shape mismatch {a.frames.shape} vs {b.frames.shape}")
    diff = a.frames.astype(np.float64) - b.frames.astype(np.float64)
    return float(np.mean(diff * diff))


def psnr(a: VideoClip, b: VideoClip) -> float:
    """10*log10(1/mse) for unit-range clips, capped at 99 dB."""
    err = mse(a, b)
    if err < 1e-10:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / err), PSNR_CAP_DB)


def temporal_consistency(clip: VideoClip) -> float:
    """Mean adjacent-frame correlation mapped to [0,1].

    Frames are centered on the range midpoint (0.5) and compared by cosine
    similarity, so a static clip scores 1.0 and alternating black/white
    frames score 0.0. Zero-variation frame pairs count as identical.
    """
    if clip.frame_count < 2:
        raise ConfigError("temporal consistency needs at least 2 frames")
    frames = clip.frames.astype(np.float64) - 0.5
    scores = []
    for i in range(clip.frame_count - 1):
        a = frames[i].ravel()
        b = frames[i + 1].ravel()
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 and nb == 0.0:
            c = 1.0
        elif na == 0.0 or nb == 0.0:
            c = 0.0
        else:
            c = float(np.dot(a, b) / (na * nb))
        scores.append((c + 1.0) / 2.0)
    return float(np.mean(scores))


def estimate_offset(
    generated: VideoClip,
    scene: GaussianScene,
    recorded_traj: Trajectory,
    intr: Intrinsics,
    grid: tuple[float, ...] = DEFAULT_GRID,
    render_cache: dict | None = None,
) -> float:
    """Photometric lateral-offset estimate: argmin over grid renders.

    Ties break toward smaller |delta|, then smaller delta. ``render_cache``
    (keyed by grid value) lets callers reuse renders across many clips of the
    same scene.
    """
    if len(grid) == 0:
        raise ConfigError("offset grid must be non-empty")
    best = None
    for delta in grid:
        if render_cache is not None and delta in render_cache:
            reference = render_cache[delta]
        else:
            reference = render_clip(scene, lateral_offset_trajectory(recorded_traj, delta), intr)
            if render_cache is not None:
                render_cache[delta] = reference
        key = (mse(generated, reference), abs(delta), delta)
        if best is None or key < best:
            best = key
    return float(best[2])


@dataclass(frozen=True)
class EvalRow:
    scene_seed: int
    delta: float
    psnr_db: float
    mse: float
    terr_m: float
    tconsist: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    per_offset_means: dict[float, dict[str, float]]
    eval_config_hash: str
    checkpoint_hash: str

    def median(self, metric: str) -> float:
        return float(np.median([getattr(r, metric) for r in self.rows]))

    def mean(self, metric: str) -> float:
        return float(np.mean([getattr(r, metric) for r in self.rows]))

    def to_csv(self) -> str:
        lines = ["scene_seed,delta,psnr_db,mse,terr_m,tconsist"]
        for r in self.rows:
            lines.append(
                f"{r.scene_seed},{r.delta:.6g},{r.psnr_db!r},{r.mse!r},{r.terr_m!r},{r.tconsist!r}"
            )
        return "\n".join(lines) + "\n"


def aggregate_rows(rows: list[EvalRow]) -> dict[float, dict[str, float]]:
    out: dict[float, dict[str, float]] = {}
    for delta in sorted({r.delta for r in rows}):
        sub = [r for r in rows if r.delta == delta]
        out[delta] = {
            "psnr_db": float(np.mean([r.psnr_db for r in sub])),
            "mse": float(np.mean([r.mse for r in sub])),
            "terr_m": float(np.mean([r.terr_m for r in sub])),
            "tconsist": float(np.mean([r.tconsist for r in sub])),
        }
    return out


@dataclass(frozen=True)
class EvalConfig:
    scene_count: int = 5
    scene_seed_base: int = HELD_OUT_SEED_FLOOR
    offsets: tuple[float, ...] = (1.0, 2.0, 3.0)  # magnitudes; both signs evaluated
    splat_count: int = 2000
    speed: float = 0.5
    curvature: float = 0.0
    sample_steps: int = 16
    seed: int = 0
    grid: tuple[float, ...] = DEFAULT_GRID
    degrade_source: bool = False
    report_path: str | None = None

    def __post_init__(self):
        if self.scene_seed_base < HELD_OUT_SEED_FLOOR:
            raise ConfigError(
                f"eval scene seeds must be >= {HELD_OUT_SEED_FLOOR} (held-out protocol)"
            )
        if self.scene_count < 1:
            raise ConfigError("scene_count must be >= 1")

    def signed_offsets(self) -> list[float]:
        return [s * m for m in self.offsets for s in (1.0, -1.0)]

    def canonical_text(self) -> str:
        pairs = [
            f"{name} = {getattr(self, name)}"
            for name in sorted(self.__dataclass_fields__)
            if name != "report_path"
        ]
        return "\n".join(pairs) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()


@dataclass
class EvalContext:
    """Everything a generator needs to produce one clip."""

    scene: GaussianScene
    recorded_traj: Trajectory
    intr: Intrinsics
    delta: float
    pair: InferencePair
    ground_truth: VideoClip
    sample_seed: int
    sample_steps: int


def oracle_generator(ctx: EvalContext) -> VideoClip:
    """Pass-through that returns the ground-truth render (harness self-test)."""
    return ctx.ground_truth


def side_by_side(*clips: VideoClip) -> VideoClip:
    """Concatenate clips horizontally (generated | ground truth | condition)."""
    if len({c.frames.shape for c in clips}) != 1:
        raise ConfigError("side-by-side clips must share dimensions")
    return VideoClip(np.concatenate([c.frames for c in clips], axis=3))


def checkpoint_generator(ckpt: Checkpoint):
    """Default generator: sample the checkpointed model."""
    model = model_from_checkpoint(ckpt)
    model.eval()

    def generate(ctx: EvalContext) -> VideoClip:
        if ckpt.variant == "repair":
            return flow.sample_repair(model, ctx.pair.condition, ctx.sample_steps)
        rel = np.stack([p.matrix3x4() for p in ctx.pair.rel_poses]).astype(np.float32)
        cond = flow.Conditioning(
            source=ctx.pair.source,
            rel_poses=rel,
            condition=ctx.pair.condition if ckpt.stage == 2 else None,
        )
        return flow.sample(model, cond, ctx.sample_steps, ctx.sample_seed)

    return generate


def run_eval(ckpt: Checkpoint | None, config: EvalConfig, generator=None) -> EvalReport:
    """Score a model (or an injected generator) on held-out scenes x offsets."""
    if generator is None:
        if ckpt is None:
            raise ConfigError("run_eval needs a checkpoint or an explicit generator")
        generator = checkpoint_generator(ckpt)
        frames, height, width = ckpt.arch.frames, ckpt.arch.height, ckpt.arch.width
    else:
        if ckpt is not None:
            frames, height, width = ckpt.arch.frames, ckpt.arch.height, ckpt.arch.width
        else:
            frames, height, width = 8, 32, 48

    params = SceneParams(
        splat_count=config.splat_count,
        trajectory_length=frames,
        speed=config.speed,
        curvature=config.curvature,
    )
    intr = make_intrinsics(width, height)
    rows: list[EvalRow] = []
    for i in range(config.scene_count):
        seed = config.scene_seed_base + i
        scene = generate_scene(seed, params)
        traj = generate_trajectory(seed, params)
        grid_cache: dict[float, VideoClip] = {}
        for delta in config.signed_offsets():
            pair = build_inference_pair(
                scene, traj, intr, delta, degrade_source=config.degrade_source
            )
            gt = render_clip(scene, lateral_offset_trajectory(traj, delta), intr)
            ctx = EvalContext(
                scene=scene,
                recorded_traj=traj,
                intr=intr,
                delta=delta,
                pair=pair,
                ground_truth=gt,
                sample_seed=derive_seed(config.seed, f"sample-{seed}-{delta}"),
                sample_steps=config.sample_steps,
            )
            generated = generator(ctx)
            est = estimate_offset(generated, scene, traj, intr, config.grid, grid_cache)
            rows.append(
                EvalRow(
                    scene_seed=seed,
                    delta=delta,
                    psnr_db=psnr(generated, gt),
                    mse=mse(generated, gt),
                    terr_m=abs(est - delta),
                    tconsist=temporal_consistency(generated),
                )
            )
    report = EvalReport(
        rows=rows,
        per_offset_means=aggregate_rows(rows),
        eval_config_hash=config.config_hash(),
        checkpoint_hash=ckpt.train_config_hash if ckpt is not None else "-",
    )
    if config.report_path:
        Path(config.report_path).write_text(report.to_csv())
    return report
