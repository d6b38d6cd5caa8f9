"""Network architecture: tokenization, conditioning, stage contracts, freezing."""

import numpy as np
import pytest
import torch

from retraj.errors import ConfigError
from retraj.geometry import Pose
from retraj.net import (
    Model,
    ModelConfig,
    PARAM_GROUPS,
    assemble_input,
    assemble_rendering,
    extend_to_stage2,
    parameter_group,
    parameter_groups,
    patchify_pixels,
    trainable_mask,
    unpatchify_pixels,
)
from retraj.renderer import VideoClip

MICRO = ModelConfig(
    d=8, heads=2, depth=1, patch=4, frames=2, height=8, width=8, time_dim=8
)


def randomize_(model: Model, seed: int, std: float = 0.05) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in model.named_parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * std)


def random_clip(cfg: ModelConfig, seed: int = 0) -> VideoClip:
    rng = np.random.default_rng(seed)
    frames = rng.uniform(0, 1, (cfg.frames, 3, cfg.height, cfg.width)).astype(np.float32)
    return VideoClip(frames)


class TestConfig:
    def test_desk_default_accepted(self):
        cfg = ModelConfig(d=128, heads=4, depth=4, patch=4, frames=8, height=32, width=48)
        assert cfg.tokens_per_frame == 96
        assert cfg.patch_dim == 48

    def test_invalid_divisibility(self):
        with pytest.raises(ConfigError):
            ModelConfig(d=10, heads=4)
        with pytest.raises(ConfigError):
            ModelConfig(height=30, patch=4)

    def test_identity_tokenizer_needs_matching_dim(self):
        with pytest.raises(ConfigError):
            ModelConfig(d=8, heads=2, patch=4, identity_tokenizer=True)
        ModelConfig(d=48, heads=2, patch=4, identity_tokenizer=True)


class TestPatchify:
    def test_token_shape(self):
        cfg = ModelConfig(d=16, heads=2, depth=1, frames=8, height=32, width=48, patch=4)
        model = Model(cfg, seed=0)
        tokens = model.patchify(random_clip(cfg))
        assert tokens.shape == (1, 8, 96, 16)

    def test_pixel_reshape_is_exact_inverse(self):
        frames = torch.randn(2, 3, 3, 8, 12)
        tokens = patchify_pixels(frames, 4)
        assert tokens.shape == (2, 3, 6, 48)
        back = unpatchify_pixels(tokens, 4, 8, 12)
        assert torch.equal(back, frames)

    def test_identity_round_trip_bit_exact(self):
        cfg = ModelConfig(
            d=48, heads=2, depth=1, frames=2, height=8, width=8, patch=4,
            identity_tokenizer=True,
        )
        model = Model(cfg, seed=0)
        clip = random_clip(cfg, seed=3)
        out = model.unpatchify(model.patchify(clip))
        assert np.array_equal(out.frames, clip.frames)

    def test_orthonormal_init_near_lossless_when_wide(self):
        cfg = ModelConfig(d=64, heads=2, depth=1, frames=2, height=8, width=8, patch=4)
        model = Model(cfg, seed=0)
        clip = random_clip(cfg, seed=4)
        out = model.unpatchify(model.patchify(clip))
        assert np.max(np.abs(out.frames - clip.frames)) < 1e-5


class TestCameraEncoder:
    def test_identity_embedding_matches_identity_pose(self):
        model = Model(MICRO, seed=1)
        poses = [Pose.identity()] * MICRO.frames
        from_poses = model.encode_camera(poses)
        c_i = model.identity_camera(1, MICRO.frames)
        assert torch.allclose(from_poses, c_i)

    def test_output_shape(self):
        model = Model(MICRO, seed=1)
        rel = np.tile(np.eye(3, 4, dtype=np.float32), (MICRO.frames, 1, 1))
        emb = model.encode_camera(rel[None])
        assert emb.shape == (1, MICRO.frames, MICRO.d)

    def test_different_offsets_differ(self):
        model = Model(MICRO, seed=1)

        def rel_for(delta):
            mat = np.tile(np.eye(3, 4, dtype=np.float32), (MICRO.frames, 1, 1))
            mat[:, 0, 3] = delta
            return mat[None]

        a = model.encode_camera(rel_for(1.0))
        b = model.encode_camera(rel_for(3.0))
        assert (a - b).norm() > 0


class TestAssemble:
    def _tokens(self, seed, cfg=MICRO):
        gen = torch.Generator().manual_seed(seed)
        l = cfg.tokens_per_frame
        return torch.randn(2, cfg.frames, l, cfg.d, generator=gen)

    def test_concat_length(self):
        x_t, x_s = self._tokens(0), self._tokens(1)
        zeros = torch.zeros(2, MICRO.frames, MICRO.d)
        emb = torch.zeros(MICRO.frames, MICRO.d)
        out = assemble_input(x_t, x_s, zeros, zeros, emb)
        assert out.shape == (2, 2 * MICRO.frames, MICRO.tokens_per_frame, MICRO.d)

    def test_zero_embeddings_plain_concat(self):
        x_t, x_s = self._tokens(0), self._tokens(1)
        zeros = torch.zeros(2, MICRO.frames, MICRO.d)
        emb = torch.zeros(MICRO.frames, MICRO.d)
        out = assemble_input(x_t, x_s, zeros, zeros, emb)
        assert torch.equal(out, torch.cat([x_t, x_s], dim=1))

    def test_elementwise_formula(self):
        x_t, x_s = self._tokens(0), self._tokens(1)
        gen = torch.Generator().manual_seed(2)
        c_r = torch.randn(2, MICRO.frames, MICRO.d, generator=gen)
        c_i = torch.randn(2, MICRO.frames, MICRO.d, generator=gen)
        emb = torch.randn(MICRO.frames, MICRO.d, generator=gen)
        out = assemble_input(x_t, x_s, c_r, c_i, emb)
        i, j = 1, 2
        expected = x_t[:, i, j] + c_r[:, i] + emb[i]
        assert torch.allclose(out[:, i, j], expected)
        expected_src = x_s[:, i, j] + c_i[:, i] + emb[i]
        assert torch.allclose(out[:, MICRO.frames + i, j], expected_src)

    def test_rendering_assembly(self):
        x_gs = self._tokens(5)
        zeros = torch.zeros(2, MICRO.frames, MICRO.d)
        emb = torch.zeros(MICRO.frames, MICRO.d)
        out = assemble_rendering(x_gs, zeros, emb)
        assert torch.equal(out, x_gs)
        gen = torch.Generator().manual_seed(6)
        c_r = torch.randn(2, MICRO.frames, MICRO.d, generator=gen)
        emb = torch.randn(MICRO.frames, MICRO.d, generator=gen)
        out = assemble_rendering(x_gs, c_r, emb)
        assert out.shape == x_gs.shape
        # matches the first-half formula of assemble_input with x_gs in the target slot
        x_s = self._tokens(7)
        joint = assemble_input(x_gs, x_s, c_r, torch.zeros_like(c_r), emb)
        assert torch.allclose(out, joint[:, : MICRO.frames])

    def test_dim_mismatch_rejected(self):
        x_t = self._tokens(0)
        bad = torch.zeros(2, MICRO.frames + 1, MICRO.d)
        with pytest.raises(ConfigError):
            assemble_input(x_t, x_t, bad, bad, torch.zeros(MICRO.frames, MICRO.d))


def _inputs(model, seed=0, batch=2):
    cfg = model.config
    gen = torch.Generator().manual_seed(seed)
    x_i = torch.randn(batch, 2 * cfg.frames, cfg.tokens_per_frame, cfg.d, generator=gen)
    t = torch.rand(batch, generator=gen)
    return x_i, t


class TestForwardStage1:
    def test_output_shape(self):
        model = Model(MICRO, seed=2)
        x_i, t = _inputs(model)
        out = model.forward_stage1(x_i, t)
        assert out.shape == (2, MICRO.frames, MICRO.tokens_per_frame, MICRO.d)

    def test_zero_head_gives_zero_velocity(self):
        model = Model(MICRO, seed=2)  # fresh init: head weight/bias are zero
        x_i, t = _inputs(model)
        assert torch.equal(model.forward_stage1(x_i, t), torch.zeros(2, 2, 4, 8))

    def test_batching_purity(self):
        model = Model(MICRO, seed=2)
        randomize_(model, 3)
        x_i, _ = _inputs(model, batch=1)
        t = torch.full((4,), 0.3)
        stacked = x_i.expand(4, -1, -1, -1).clone()
        out = model.forward_stage1(stacked, t)
        for b in range(1, 4):
            assert torch.equal(out[b], out[0])

    def test_half_swap_changes_output(self):
        model = Model(MICRO, seed=2)
        randomize_(model, 4)
        x_i, t = _inputs(model)
        swapped = torch.cat([x_i[:, MICRO.frames :], x_i[:, : MICRO.frames]], dim=1)
        assert not torch.allclose(model.forward_stage1(x_i, t), model.forward_stage1(swapped, t))

    def test_non_finite_input_raises(self):
        from retraj.errors import NumericError

        model = Model(MICRO, seed=2)
        randomize_(model, 5)
        x_i, t = _inputs(model)
        x_i[0, 0, 0, 0] = float("inf")
        with pytest.raises(NumericError):
            model.forward_stage1(x_i, t)


class TestForwardStage2:
    def _pair(self, seed=11):
        base = Model(MICRO, seed=seed)
        randomize_(base, seed + 1)
        ext = extend_to_stage2(base, seed=seed + 2)
        return base, ext

    def test_requires_stage2_model(self):
        model = Model(MICRO, seed=0)
        x_i, t = _inputs(model)
        r = torch.randn(2, MICRO.frames, MICRO.tokens_per_frame, MICRO.d)
        with pytest.raises(ConfigError):
            model.forward_stage2(x_i, r, t)

    def test_init_equivalence_with_stage1(self):
        base, ext = self._pair()
        x_i, t = _inputs(base, seed=5)
        gen = torch.Generator().manual_seed(6)
        x_gs = torch.randn(2, MICRO.frames, MICRO.tokens_per_frame, MICRO.d, generator=gen)
        out1 = base.forward_stage1(x_i, t)
        out2 = ext.forward_stage2(x_i, x_gs, t)
        assert torch.max(torch.abs(out1 - out2)) <= 1e-6

    def test_output_shape(self):
        _, ext = self._pair()
        x_i, t = _inputs(ext)
        x_gs = torch.randn(2, MICRO.frames, MICRO.tokens_per_frame, MICRO.d)
        assert ext.forward_stage2(x_i, x_gs, t).shape == (2, 2, 4, 8)

    def test_rendering_path_live_after_one_step(self):
        _, ext = self._pair()
        x_i, t = _inputs(ext, seed=7)
        gen = torch.Generator().manual_seed(8)
        x_gs = torch.randn(2, MICRO.frames, MICRO.tokens_per_frame, MICRO.d, generator=gen)
        target = torch.randn(2, MICRO.frames, MICRO.tokens_per_frame, MICRO.d, generator=gen)
        groups = parameter_groups(ext)
        mask = trainable_mask(groups, stage=2)
        loss = (ext.forward_stage2(x_i, x_gs, t) - target).pow(2).mean()
        loss.backward()
        with torch.no_grad():
            for name, p in ext.named_parameters():
                if mask[name] and p.grad is not None:
                    p -= 0.5 * p.grad
        out_a = ext.forward_stage2(x_i, x_gs, t)
        noise = torch.randn(x_gs.shape, generator=gen)
        out_b = ext.forward_stage2(x_i, x_gs + 0.5 * noise, t)
        assert not torch.allclose(out_a, out_b)


class TestParameterGroups:
    def test_partition_exhaustive_and_disjoint(self):
        model = extend_to_stage2(Model(MICRO, seed=0), seed=1)
        groups = parameter_groups(model)
        assert set(groups.values()) == set(PARAM_GROUPS)
        # every parameter got exactly one group (mapping is a function by construction)
        assert len(groups) == sum(1 for _ in model.named_parameters())

    def test_unknown_parameter_rejected(self):
        with pytest.raises(ConfigError):
            parameter_group("mystery.weight")

    def test_stage1_mask(self):
        model = Model(MICRO, seed=0)
        mask = trainable_mask(parameter_groups(model), stage=1)
        assert all(mask.values())  # stage-1 models carry no stage-2 groups
        assert not any(parameter_group(n) == "rendering_attention" for n in mask)

    def test_stage2_mask_freezes_base(self):
        model = extend_to_stage2(Model(MICRO, seed=0), seed=1)
        groups = parameter_groups(model)
        mask = trainable_mask(groups, stage=2)
        for name, trainable in mask.items():
            if groups[name] in ("rendering_attention", "cross_attention"):
                assert trainable
            else:
                assert not trainable
        assert any(groups[n] == "self_attention" and not mask[n] for n in mask)

    def test_unknown_stage(self):
        model = Model(MICRO, seed=0)
        with pytest.raises(ConfigError):
            trainable_mask(parameter_groups(model), stage=3)
