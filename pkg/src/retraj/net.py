"""Conditioned diffusion transformer over patch tokens.

The model predicts a velocity field in token space. Stage 1 conditions on a
source clip plus per-frame relative camera poses: target and source token
streams (tagged by pose embeddings and a learnable frame embedding) are
concatenated along the frame axis and processed by DiT blocks with full
self-attention. Stage 2 freezes everything from stage 1 and adds, per block,
a rendering attention (self-attention over tokens of the structural rendering
condition) and a cross attention that injects the rendering stream into the
diffusion stream. Cross-attention output projections start at zero, so a
freshly extended model reproduces its stage-1 behavior exactly.

Parameters are partitioned into named groups; the stage decides which groups
train (see ``trainable_mask``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, NumericError
from .geometry import Pose
from .renderer import VideoClip

PARAM_GROUPS = (
    "tokenizer",
    "camera_encoder",
    "frame_embedding",
    "self_attention",
    "ffn_norm",
    "rendering_attention",
    "cross_attention",
    "output_head",
)

STAGE1_TRAINABLE = frozenset(
    {"tokenizer", "camera_encoder", "frame_embedding", "self_attention", "ffn_norm", "output_head"}
)
STAGE2_TRAINABLE = frozenset({"rendering_attention", "cross_attention"})


@dataclass(frozen=True)
class ModelConfig:
    d: int = 128
    heads: int = 4
    depth: int = 4
    patch: int = 4
    frames: int = 8
    height: int = 32
    width: int = 48
    time_dim: int = 64
    stage: int = 1
    cam_hidden: int = 0  # 0 -> 2*d
    ffn_mult: int = 4
    identity_tokenizer: bool = False

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigError("d must be divisible by heads")
        if self.d % 2 != 0:
            raise ConfigError("d must be even (sinusoidal position table)")
        if self.height % self.patch != 0 or self.width % self.patch != 0:
            raise ConfigError("height and width must be divisible by patch size")
        if self.stage not in (1, 2):
            raise ConfigError("stage must be 1 or 2")
        if self.identity_tokenizer and self.d != self.patch_dim:
            raise ConfigError(
                f"identity tokenizer needs d == 3*patch^2 ({self.patch_dim}), got d={self.d}"
            )

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch * self.patch

    @property
    def tokens_per_frame(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    def for_stage(self, stage: int) -> "ModelConfig":
        return replace(self, stage=stage)


def parameter_group(name: str) -> str:
    """Map a parameter name to its group; raises on anything unassigned."""
    if name.startswith("tokenizer."):
        return "tokenizer"
    if name.startswith("camera_encoder."):
        return "camera_encoder"
    if name == "frame_embedding":
        return "frame_embedding"
    if name.startswith("time_mlp."):
        return "ffn_norm"
    if name.startswith(("head.", "head_mod.", "head_skip.")):
        return "output_head"
    if name.startswith("blocks."):
        sub = name.split(".", 2)[2]
        if sub.startswith("attn."):
            return "self_attention"
        if sub.startswith(("mod.", "ffn.")):
            return "ffn_norm"
        if sub.startswith(("rend_attn.", "rend_mod.")):
            return "rendering_attention"
        if sub.startswith("cross."):
            return "cross_attention"
    raise ConfigError(f"parameter {name!r} has no group assignment")


def parameter_groups(model: nn.Module) -> dict[str, str]:
    """name -> group for every parameter; the partition is exhaustive by construction."""
    return {name: parameter_group(name) for name, _ in model.named_parameters()}


def trainable_mask(groups: dict[str, str], stage: int) -> dict[str, bool]:
    """Which parameters train at the given stage."""
    if stage == 1:
        allowed = STAGE1_TRAINABLE
    elif stage == 2:
        allowed = STAGE2_TRAINABLE
    else:
        raise ConfigError(f"unknown stage {stage}")
    return {name: group in allowed for name, group in groups.items()}


def sinusoidal_table(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Classic sin/cos position table, shape (length, dim). dim must be even."""
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    idx = torch.arange(dim // 2, dtype=torch.float64)[None, :]
    angles = pos / torch.pow(10000.0, 2.0 * idx / dim)
    table = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
    return table.to(dtype)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of t in [0,1], shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    ).to(t.dtype)
    args = t[:, None].to(freqs) * 1000.0 * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _modulate(h: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return h * (1.0 + scale[:, None, :]) + shift[:, None, :]


class Attention(nn.Module):
    """Multi-head self-attention over a flat token sequence."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = d // heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = (self._split(h) for h in self.qkv(x).chunk(3, dim=-1))
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class CrossAttention(nn.Module):
    """Query stream attends into the rendering stream; output proj starts at zero.

    Logits carry learnable same-location / same-frame biases so the
    geometrically aligned lookup (token (i,j) reads rendering token (i,j))
    exists from the first step instead of having to emerge from noise-swamped
    content matching.
    """

    def __init__(self, d: int, heads: int, tokens_per_frame: int):
        super().__init__()
        self.heads = heads
        self.head_dim = d // heads
        self.tokens_per_frame = tokens_per_frame
        self.norm_q = nn.LayerNorm(d, elementwise_affine=False)
        self.norm_kv = nn.LayerNorm(d, elementwise_affine=False)
        self.q = nn.Linear(d, d)
        self.kv = nn.Linear(d, 2 * d)
        self.out = nn.Linear(d, d)
        self.loc_gain = nn.Parameter(torch.tensor(2.0))
        self.frame_gain = nn.Parameter(torch.tensor(2.0))

    def _match_bias(self, n_q: int, n_k: int, dtype) -> torch.Tensor:
        l = self.tokens_per_frame
        qi = torch.arange(n_q)
        ki = torch.arange(n_k)
        same_loc = (qi[:, None] % l) == (ki[None, :] % l)
        kv_frames = n_k // l
        same_frame = ((qi[:, None] // l) % kv_frames) == (ki[None, :] // l)
        return self.loc_gain * same_loc.to(dtype) + self.frame_gain * same_frame.to(dtype)

    def forward(self, x: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q = self.q(self.norm_q(x))
        k, v = self.kv(self.norm_kv(r)).chunk(2, dim=-1)
        split = lambda h: h.view(b, -1, self.heads, self.head_dim).transpose(1, 2)
        logits = split(q) @ split(k).transpose(-1, -2) / math.sqrt(self.head_dim)
        logits = logits + self._match_bias(n, r.shape[1], logits.dtype)
        attn = torch.softmax(logits, dim=-1)
        y = (attn @ split(v)).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class FeedForward(nn.Module):
    def __init__(self, d: int, mult: int):
        super().__init__()
        self.fc1 = nn.Linear(d, mult * d)
        self.fc2 = nn.Linear(mult * d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class DiTBlock(nn.Module):
    """Pre-norm self-attention + FFN with adaLN-zero time modulation.

    With stage2=True the block carries a rendering attention (structurally a
    second self-attention, acting on the rendering stream) and a cross
    attention fusing that stream into the main one.
    """

    def __init__(self, d: int, heads: int, ffn_mult: int, stage2: bool, tokens_per_frame: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False)
        self.attn = Attention(d, heads)
        self.ffn = FeedForward(d, ffn_mult)
        self.mod = nn.Linear(d, 6 * d)
        if stage2:
            self.rend_norm = nn.LayerNorm(d, elementwise_affine=False)
            self.rend_attn = Attention(d, heads)
            self.rend_mod = nn.Linear(d, 3 * d)
            self.cross = CrossAttention(d, heads, tokens_per_frame)
        else:
            self.rend_attn = None
            self.cross = None

    def _self_attn(self, x, mods):
        sh1, sc1, g1 = mods[:3]
        return x + g1[:, None, :] * self.attn(_modulate(self.norm1(x), sh1, sc1))

    def _ffn(self, x, mods):
        sh2, sc2, g2 = mods[3:]
        return x + g2[:, None, :] * self.ffn(_modulate(self.norm2(x), sh2, sc2))

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        mods = self.mod(torch.nn.functional.silu(temb)).chunk(6, dim=-1)
        return self._ffn(self._self_attn(x, mods), mods)

    def forward_with_rendering(
        self, x: torch.Tensor, r: torch.Tensor, temb: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if self.rend_attn is None:
            raise ConfigError("stage-2 modules are missing on this block")
        mods = self.mod(torch.nn.functional.silu(temb)).chunk(6, dim=-1)
        x = self._self_attn(x, mods)
        rsh, rsc, rg = self.rend_mod(torch.nn.functional.silu(temb)).chunk(3, dim=-1)
        r = r + rg[:, None, :] * self.rend_attn(_modulate(self.rend_norm(r), rsh, rsc))
        x = x + self.cross(x, r)
        x = self._ffn(x, mods)
        return x, r


class CameraEncoder(nn.Module):
    """Two-layer perceptron from a flattened 3x4 pose matrix to d channels."""

    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(12, hidden)
        self.fc2 = nn.Linear(hidden, d)

    def forward(self, flat_poses: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.silu(self.fc1(flat_poses)))


class Tokenizer(nn.Module):
    """Learned linear projections between patch pixels and token channels."""

    def __init__(self, patch_dim: int, d: int):
        super().__init__()
        self.proj_in = nn.Linear(patch_dim, d)
        self.proj_out = nn.Linear(d, patch_dim)


def patchify_pixels(frames: torch.Tensor, patch: int) -> torch.Tensor:
    """(B,F,3,H,W) -> (B,F,l,3*p*p) pure reshape; exact inverse of unpatchify_pixels."""
    b, f, c, h, w = frames.shape
    gh, gw = h // patch, w // patch
    x = frames.view(b, f, c, gh, patch, gw, patch)
    x = x.permute(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(b, f, gh * gw, c * patch * patch)


def unpatchify_pixels(tokens: torch.Tensor, patch: int, height: int, width: int) -> torch.Tensor:
    """Exact inverse of patchify_pixels."""
    b, f, l, pd = tokens.shape
    gh, gw = height // patch, width // patch
    c = pd // (patch * patch)
    x = tokens.view(b, f, gh, gw, c, patch, patch)
    x = x.permute(0, 1, 4, 2, 5, 3, 6)
    return x.reshape(b, f, c, height, width)


def assemble_input(
    x_t: torch.Tensor,
    x_s: torch.Tensor,
    c_r: torch.Tensor,
    c_i: torch.Tensor,
    frame_embedding: torch.Tensor,
) -> torch.Tensor:
    """Concatenate (target + pose + frame emb, source + identity + frame emb) along frames.

    x_t, x_s: (B,f,l,d); c_r, c_i: (B,f,d); frame_embedding: (f,d).
    Returns (B,2f,l,d).
    """
    if x_t.shape != x_s.shape:
        raise ConfigError(f"target/source token shapes differ: {x_t.shape} vs {x_s.shape}")
    if c_r.shape[-1] != x_t.shape[-1] or c_r.shape[1] != x_t.shape[1]:
        raise ConfigError("camera embedding does not match token dims")
    emb = frame_embedding[None, :, None, :]
    return torch.cat([x_t + c_r[:, :, None, :] + emb, x_s + c_i[:, :, None, :] + emb], dim=1)


def assemble_rendering(
    x_gs: torch.Tensor, c_r: torch.Tensor, frame_embedding: torch.Tensor
) -> torch.Tensor:
    """Tag rendering-condition tokens with pose and frame embeddings (shape-preserving)."""
    if c_r.shape[-1] != x_gs.shape[-1] or c_r.shape[1] != x_gs.shape[1]:
        raise ConfigError("camera embedding does not match rendering token dims")
    return x_gs + c_r[:, :, None, :] + frame_embedding[None, :, None, :]


class Model(nn.Module):
    """The full velocity-prediction network (stage 1, optionally extended to stage 2)."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        d = config.d
        self.tokenizer = Tokenizer(config.patch_dim, d)
        self.camera_encoder = CameraEncoder(d, config.cam_hidden or 2 * d)
        self.frame_embedding = nn.Parameter(torch.zeros(config.frames, d))
        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_dim, d), nn.SiLU(), nn.Linear(d, d)
        )
        self.blocks = nn.ModuleList(
            [
                DiTBlock(
                    d,
                    config.heads,
                    config.ffn_mult,
                    stage2=config.stage == 2,
                    tokens_per_frame=config.tokens_per_frame,
                )
                for _ in range(config.depth)
            ]
        )
        self.head_norm = nn.LayerNorm(d, elementwise_affine=False)
        self.head = nn.Linear(d, d)
        # time-modulated head: shift/scale on the normed features plus a
        # time-gained skip from the (noisy) input tokens, so the exact
        # straight-path algebra v = (x1 - x_t)/(1 - t) is cheap to express
        self.head_mod = nn.Linear(d, 2 * d)
        self.head_skip = nn.Linear(d, d)
        self.register_buffer(
            "pos_table", sinusoidal_table(config.tokens_per_frame, d), persistent=False
        )
        self.reset_parameters(seed)
        if dtype != torch.float32:
            self.to(dtype)

    # -- initialization ----------------------------------------------------

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)

        def normal_(tensor, std=0.02):
            with torch.no_grad():
                tensor.copy_(torch.randn(tensor.shape, generator=gen) * std)

        def zero_(tensor):
            with torch.no_grad():
                tensor.zero_()

        for module in [self.camera_encoder.fc1, self.camera_encoder.fc2]:
            normal_(module.weight)
            zero_(module.bias)
        normal_(self.frame_embedding)
        for lin in [self.time_mlp[0], self.time_mlp[2]]:
            normal_(lin.weight)
            zero_(lin.bias)
        self._init_tokenizer(gen)
        for block in self.blocks:
            self._init_block(block, gen)
        # zero head (and its modulation/skip): the model predicts zero velocity at init
        for lin in [self.head, self.head_mod, self.head_skip]:
            zero_(lin.weight)
            zero_(lin.bias)

    def _init_tokenizer(self, gen) -> None:
        pd, d = self.config.patch_dim, self.config.d
        with torch.no_grad():
            if self.config.identity_tokenizer:
                w_in = torch.eye(d)
            else:
                q, _ = torch.linalg.qr(torch.randn(max(pd, d), max(pd, d), generator=gen))
                w_in = q[:d, :pd]
            self.tokenizer.proj_in.weight.copy_(w_in)
            self.tokenizer.proj_in.bias.zero_()
            self.tokenizer.proj_out.weight.copy_(w_in.T)
            self.tokenizer.proj_out.bias.zero_()

    def _init_block(self, block: DiTBlock, gen) -> None:
        def normal_(tensor, std=0.02):
            with torch.no_grad():
                tensor.copy_(torch.randn(tensor.shape, generator=gen) * std)

        def zero_(tensor):
            with torch.no_grad():
                tensor.zero_()

        for lin in [block.attn.qkv, block.attn.out, block.ffn.fc1, block.ffn.fc2]:
            normal_(lin.weight)
            zero_(lin.bias)
        zero_(block.mod.weight)
        zero_(block.mod.bias)
        if block.rend_attn is not None:
            self.init_stage2_block(block, gen)

    def init_stage2_block(self, block: DiTBlock, gen) -> None:
        def normal_(tensor, std=0.02):
            with torch.no_grad():
                tensor.copy_(torch.randn(tensor.shape, generator=gen) * std)

        def zero_(tensor):
            with torch.no_grad():
                tensor.zero_()

        d = self.config.d
        for lin in [block.rend_attn.qkv, block.rend_attn.out]:
            normal_(lin.weight)
            zero_(lin.bias)
        zero_(block.rend_mod.weight)
        zero_(block.rend_mod.bias)
        # identity q/k/v: cross attention starts as same-position lookup into the
        # rendering stream (the shared position/frame embeddings carry the match),
        # which is the circuit it must end up learning anyway
        with torch.no_grad():
            block.cross.q.weight.copy_(torch.eye(d))
            block.cross.q.bias.zero_()
            block.cross.kv.weight.copy_(torch.cat([torch.eye(d), torch.eye(d)], dim=0))
            block.cross.kv.bias.zero_()
        # zero output projection: a fresh stage-2 model equals its stage-1 base
        zero_(block.cross.out.weight)
        zero_(block.cross.out.bias)

    # -- tokenization ------------------------------------------------------

    def _frames_tensor(self, clip) -> torch.Tensor:
        if isinstance(clip, VideoClip):
            frames = torch.from_numpy(clip.frames)
        elif isinstance(clip, np.ndarray):
            frames = torch.from_numpy(clip)
        else:
            frames = clip
        if frames.dim() == 4:
            frames = frames[None]
        return frames.to(self.head.weight.dtype)

    def patchify(self, clip) -> torch.Tensor:
        """Clip or (B,F,3,H,W)/(F,3,H,W) tensor -> token tensor (B,f,l,d)."""
        frames = self._frames_tensor(clip)
        pix = patchify_pixels(frames, self.config.patch)
        return self.tokenizer.proj_in(pix)

    def decode_frames(self, tokens: torch.Tensor) -> torch.Tensor:
        """Raw decode, (B,f,l,d) -> (B,F,3,H,W); no clamping."""
        pix = self.tokenizer.proj_out(tokens)
        return unpatchify_pixels(pix, self.config.patch, self.config.height, self.config.width)

    def unpatchify(self, tokens: torch.Tensor) -> VideoClip:
        """Decode one sample's tokens to a clip, clamped to [0,1]."""
        if tokens.dim() == 3:
            tokens = tokens[None]
        frames = self.decode_frames(tokens).clamp(0.0, 1.0)
        return VideoClip(frames[0].detach().cpu().numpy())

    # -- conditioning ------------------------------------------------------

    def encode_camera(self, rel_poses) -> torch.Tensor:
        """Relative poses -> (B,f,d) embedding.

        Accepts a sequence of Pose, an (f,3,4)/(B,f,3,4) array, or a
        pre-flattened (...,12) tensor.
        """
        if isinstance(rel_poses, (list, tuple)) and rel_poses and isinstance(rel_poses[0], Pose):
            arr = np.stack([p.matrix3x4() for p in rel_poses]).astype(np.float32)
            flat = torch.from_numpy(arr).reshape(1, len(rel_poses), 12)
        else:
            t = rel_poses if torch.is_tensor(rel_poses) else torch.from_numpy(np.asarray(rel_poses))
            if t.shape[-2:] == (3, 4):
                t = t.reshape(*t.shape[:-2], 12)
            flat = t if t.dim() == 3 else t[None]
        return self.camera_encoder(flat.to(self.head.weight.dtype))

    def identity_camera(self, batch: int, frames: int | None = None) -> torch.Tensor:
        """The zero-motion embedding c_I, shape (batch, f, d)."""
        f = frames or self.config.frames
        flat = torch.eye(3, 4, dtype=self.head.weight.dtype).reshape(1, 1, 12)
        return self.camera_encoder(flat.expand(batch, f, 12))

    # -- forward passes ----------------------------------------------------

    def _time_embedding(self, t: torch.Tensor, batch: int) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=self.head.weight.dtype)
        if t.dim() == 0:
            t = t.expand(batch)
        return self.time_mlp(timestep_embedding(t, self.config.time_dim))

    def _add_positions(self, tokens: torch.Tensor) -> torch.Tensor:
        return tokens + self.pos_table[None, None].to(tokens.dtype)

    def _finish(
        self, x: torch.Tensor, x_i: torch.Tensor, temb: torch.Tensor, batch: int, frames: int
    ) -> torch.Tensor:
        f = self.config.frames
        x = x.view(batch, frames, self.config.tokens_per_frame, self.config.d)
        shift, scale = self.head_mod(torch.nn.functional.silu(temb)).chunk(2, dim=-1)
        h = self.head_norm(x[:, :f])
        h = h * (1.0 + scale[:, None, None, :]) + shift[:, None, None, :]
        gain = self.head_skip(torch.nn.functional.silu(temb))
        out = self.head(h) + gain[:, None, None, :] * x_i[:, :f]
        if not torch.isfinite(out).all():
            raise NumericError("non-finite activations in forward pass")
        return out

    def forward_stage1(self, x_i: torch.Tensor, t) -> torch.Tensor:
        """(B,2f,l,d) or (B,f,l,d) tokens -> velocity for the first f frames."""
        b, frames, l, d = x_i.shape
        temb = self._time_embedding(t, b)
        x = self._add_positions(x_i).reshape(b, frames * l, d)
        for block in self.blocks:
            x = block(x, temb)
        return self._finish(x, x_i, temb, b, frames)

    def forward_stage2(self, x_i: torch.Tensor, x_gs_bar: torch.Tensor, t) -> torch.Tensor:
        """Stage-1 stream plus rendering stream; requires stage-2 modules."""
        if self.config.stage != 2:
            raise ConfigError("forward_stage2 requires a stage-2 model")
        b, frames, l, d = x_i.shape
        temb = self._time_embedding(t, b)
        x = self._add_positions(x_i).reshape(b, frames * l, d)
        r = self._add_positions(x_gs_bar).reshape(b, -1, d)
        for block in self.blocks:
            x, r = block.forward_with_rendering(x, r, temb)
        return self._finish(x, x_i, temb, b, frames)

    forward = forward_stage1


def extend_to_stage2(model: Model, seed: int) -> Model:
    """Clone a stage-1 model into a stage-2 one: base weights copied verbatim,
    rendering/cross modules freshly initialized (cross output projections zero)."""
    out = Model(model.config.for_stage(2), seed=seed, dtype=model.head.weight.dtype)
    with torch.no_grad():
        own = dict(out.named_parameters())
        for name, param in model.named_parameters():
            own[name].copy_(param)
    return out
