"""Flow-matching objective and deterministic Euler ODE sampling.

Training pairs a unit-Gaussian draw x0 with clean target tokens x1 along the
straight path x_t = t*x1 + (1-t)*x0, whose velocity is the constant x1 - x0.
The network regresses that velocity under squared error; sampling integrates
dx/dt = v(x, t) from t=0 to t=1 with uniform Euler steps (exact on straight
paths, which is what makes the oracle tests discriminating).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, NumericError
from .net import Model, assemble_input, assemble_rendering
from .renderer import VideoClip


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t) -> torch.Tensor:
    """Straight-path point t*x1 + (1-t)*x0; t scalar or per-sample (B,)."""
    if x0.shape != x1.shape:
        raise ConfigError(f"shape mismatch {tuple(x0.shape)} vs {tuple(x1.shape)}")
    t = torch.as_tensor(t, dtype=x0.dtype)
    if t.min() < 0.0 or t.max() > 1.0:
        raise ConfigError("t must lie in [0,1]")
    while t.dim() < x0.dim():
        t = t.unsqueeze(-1)
    return t * x1 + (1.0 - t) * x0


def target_velocity(x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    """Velocity of the straight path: x1 - x0, independent of t."""
    if x0.shape != x1.shape:
        raise ConfigError(f"shape mismatch {tuple(x0.shape)} vs {tuple(x1.shape)}")
    return x1 - x0


def fm_loss(predicted: torch.Tensor, velocity: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and target velocity."""
    if predicted.shape != velocity.shape:
        raise ConfigError(
            f"shape mismatch {tuple(predicted.shape)} vs {tuple(velocity.shape)}"
        )
    if not (torch.isfinite(predicted).all() and torch.isfinite(velocity).all()):
        raise NumericError("non-finite input to fm_loss")
    return (predicted - velocity).pow(2).mean()


def sample_timestep(generator: torch.Generator, batch: int = 1) -> torch.Tensor:
    """Uniform draw(s) in [0,1)."""
    return torch.rand(batch, generator=generator)


def integrate(velocity_fn, x0: torch.Tensor, steps: int) -> torch.Tensor:
    """Euler-integrate dx/dt = velocity_fn(x, t) from t=0 to 1 in uniform steps."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    x = x0
    dt = 1.0 / steps
    for k in range(steps):
        v = velocity_fn(x, k * dt)
        x = x + dt * v
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite sampler state at step {k}")
    return x


@dataclass
class Conditioning:
    """Inference-time inputs: a source clip, optional rendering condition, poses."""

    source: VideoClip
    rel_poses: np.ndarray  # (f, 3, 4) float32
    condition: VideoClip | None = None


def sample(model: Model, conditions: Conditioning, steps: int, seed: int) -> VideoClip:
    """Generate a clip: Gaussian token draw, Euler integration, decode, clamp."""
    cfg = model.config
    with torch.no_grad():
        x_s = model.patchify(conditions.source)
        c_r = model.encode_camera(conditions.rel_poses[None])
        c_i = model.identity_camera(1)
        use_rendering = cfg.stage == 2
        if use_rendering:
            if conditions.condition is None:
                raise ConfigError("stage-2 sampling needs a rendering condition clip")
            x_gs = model.patchify(conditions.condition)
            x_gs_bar = assemble_rendering(x_gs, c_r, model.frame_embedding)

        def velocity_fn(x, t):
            x_i = assemble_input(x, x_s, c_r, c_i, model.frame_embedding)
            if use_rendering:
                return model.forward_stage2(x_i, x_gs_bar, torch.full((1,), t))
            return model.forward_stage1(x_i, torch.full((1,), t))

        gen = torch.Generator().manual_seed(seed)
        x0 = torch.randn(
            (1, cfg.frames, cfg.tokens_per_frame, cfg.d),
            generator=gen,
            dtype=x_s.dtype,
        )
        tokens = integrate(velocity_fn, x0, steps)
        return model.unpatchify(tokens)


def sample_repair(model: Model, condition: VideoClip, steps: int) -> VideoClip:
    """Degraded-to-clean bridge: integrate from the condition's own tokens."""
    with torch.no_grad():
        x0 = model.patchify(condition)
        c_i = model.identity_camera(1)

        def velocity_fn(x, t):
            x_single = x + c_i[:, :, None, :] + model.frame_embedding[None, :, None, :]
            return model.forward_stage1(x_single, torch.full((1,), t))

        tokens = integrate(velocity_fn, x0, steps)
        return model.unpatchify(tokens)
