"""Flow-matching primitives and the Euler sampler."""

import numpy as np
import pytest
import torch

from retraj.errors import ConfigError, NumericError
from retraj.flow import (
    Conditioning,
    fm_loss,
    integrate,
    interpolate,
    sample,
    sample_timestep,
    target_velocity,
)
from retraj.net import Model, ModelConfig
from retraj.renderer import VideoClip


def tensors(seed=0, shape=(2, 3, 4)):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=gen), torch.randn(shape, generator=gen)


class TestInterpolate:
    def test_endpoints_exact(self):
        x0, x1 = tensors()
        assert torch.equal(interpolate(x0, x1, 0.0), x0)
        assert torch.equal(interpolate(x0, x1, 1.0), x1)

    def test_midpoint(self):
        x0, x1 = tensors(1)
        assert torch.allclose(interpolate(x0, x1, 0.5), (x0 + x1) / 2)

    def test_per_sample_t(self):
        x0, x1 = tensors(2, shape=(3, 2, 2))
        t = torch.tensor([0.0, 0.5, 1.0])
        out = interpolate(x0, x1, t)
        assert torch.equal(out[0], x0[0])
        assert torch.equal(out[2], x1[2])

    def test_out_of_range_rejected(self):
        x0, x1 = tensors()
        with pytest.raises(ConfigError):
            interpolate(x0, x1, 1.5)


class TestTargetVelocity:
    def test_zero_when_equal(self):
        x0, _ = tensors()
        assert torch.equal(target_velocity(x0, x0), torch.zeros_like(x0))

    def test_finite_difference_oracle(self):
        x0, x1 = tensors(3)
        eps = 1e-3
        t = 0.4
        fd = (interpolate(x0, x1, t + eps) - interpolate(x0, x1, t)) / eps
        assert torch.max(torch.abs(fd - target_velocity(x0, x1))) <= 1e-3

    def test_linearity(self):
        x0, x1 = tensors(4)
        assert torch.allclose(target_velocity(2 * x0, 2 * x1), 2 * target_velocity(x0, x1))


class TestFmLoss:
    def test_perfect_predictor(self):
        _, v = tensors(5)
        assert fm_loss(v, v).item() == 0.0

    def test_shift_by_one(self):
        _, v = tensors(6)
        assert fm_loss(v + 1.0, v).item() == pytest.approx(1.0, rel=1e-6)

    def test_nonnegative_and_symmetric(self):
        a, b = tensors(7)
        assert fm_loss(a, b).item() >= 0.0
        assert fm_loss(a, b).item() == pytest.approx(fm_loss(b, a).item(), rel=1e-7)

    def test_zero_iff_equal(self):
        a, b = tensors(8)
        assert fm_loss(a, b).item() > 0.0

    def test_gradient_matches_closed_form(self):
        a, b = tensors(9)
        a = a.clone().requires_grad_(True)
        fm_loss(a, b).backward()
        expected = 2.0 * (a.detach() - b) / a.numel()
        assert torch.max(torch.abs(a.grad - expected)) <= 1e-6

    def test_non_finite_rejected(self):
        a, b = tensors(10)
        a[0, 0, 0] = float("nan")
        with pytest.raises(NumericError):
            fm_loss(a, b)


class TestSampleTimestep:
    def test_range_and_mean(self):
        gen = torch.Generator().manual_seed(0)
        draws = sample_timestep(gen, 10_000)
        assert draws.min() >= 0.0 and draws.max() < 1.0
        assert 0.48 <= draws.mean().item() <= 0.52

    def test_reproducible(self):
        a = sample_timestep(torch.Generator().manual_seed(3), 16)
        b = sample_timestep(torch.Generator().manual_seed(3), 16)
        assert torch.equal(a, b)


class TestIntegrate:
    @pytest.mark.parametrize("steps", [1, 4, 32])
    def test_constant_velocity_reaches_x1(self, steps):
        gen = torch.Generator().manual_seed(11)
        x0 = torch.randn(2, 3, 4, generator=gen)
        x1 = torch.randn(2, 3, 4, generator=gen)
        out = integrate(lambda x, t: x1 - x0, x0, steps)
        rel = torch.max(torch.abs(out - x1)) / torch.max(torch.abs(x1))
        assert rel <= 1e-5

    def test_single_step_is_one_update(self):
        gen = torch.Generator().manual_seed(12)
        x0 = torch.randn(5, generator=gen)
        v = torch.randn(5, generator=gen)
        out = integrate(lambda x, t: v, x0, 1)
        assert torch.allclose(out, x0 + v)

    def test_non_finite_state_rejected(self):
        x0 = torch.zeros(3)
        with pytest.raises(NumericError):
            integrate(lambda x, t: torch.full_like(x, float("inf")), x0, 2)

    def test_invalid_steps(self):
        with pytest.raises(ConfigError):
            integrate(lambda x, t: x, torch.zeros(2), 0)


class TestSample:
    def _setup(self):
        cfg = ModelConfig(d=8, heads=2, depth=1, patch=4, frames=2, height=8, width=8, time_dim=8)
        model = Model(cfg, seed=0)
        rng = np.random.default_rng(0)
        clip = VideoClip(rng.uniform(0, 1, (2, 3, 8, 8)).astype(np.float32))
        rel = np.tile(np.eye(3, 4, dtype=np.float32), (2, 1, 1))
        return model, Conditioning(source=clip, rel_poses=rel)

    def test_deterministic(self):
        model, cond = self._setup()
        a = sample(model, cond, steps=4, seed=9)
        b = sample(model, cond, steps=4, seed=9)
        assert np.array_equal(a.frames, b.frames)

    def test_seed_changes_output(self):
        model, cond = self._setup()
        a = sample(model, cond, steps=4, seed=9)
        b = sample(model, cond, steps=4, seed=10)
        assert not np.array_equal(a.frames, b.frames)

    def test_output_dims_and_range(self):
        model, cond = self._setup()
        out = sample(model, cond, steps=2, seed=1)
        assert out.frames.shape == (2, 3, 8, 8)
        assert out.frames.min() >= 0.0 and out.frames.max() <= 1.0
