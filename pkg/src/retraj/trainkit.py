"""Two-stage training: loop, masked Adam, presets, and checkpoint IO.

Stage 1 trains the base network (tokenizer, camera encoder, frame embedding,
self-attention, FFN/norm modulation, output head) on pose-conditioned
regeneration. Stage 2 starts from a stage-1 checkpoint, freezes every stage-1
group bit-for-bit, and trains only the rendering/cross attention modules that
consume the structural rendering condition. Ablation presets rewire the same
loop: pose-only (stage 1 throughout), one-stage (stage-2 architecture, all
groups trainable from scratch), longitudinal-data (same pipeline on
longitudinally curated triples), repair-baseline (degraded-to-clean bridge on
a single stream).

Checkpoints and datasets share the .pdt container; loss logs are CSV.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import flow
from .container import read_container, write_container
from .curation import LoadedDataset, load_dataset
from .errors import CheckpointError, ConfigError, NumericError
from .net import (
    Model,
    ModelConfig,
    assemble_input,
    assemble_rendering,
    extend_to_stage2,
    parameter_groups,
    trainable_mask,
)

PRESETS = ("none", "pose-only", "one-stage", "longitudinal-data", "repair-baseline")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def derive_seed(seed: int, label: str) -> int:
    """Stable 63-bit sub-seed for a named random stream."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class TrainConfig:
    data_path: str
    stage: int = 1
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    seed: int = 0
    init_ckpt: str | None = None  # stage-2 starting point
    preset: str = "none"
    out_path: str | None = None
    log_path: str | None = None
    # model capacity (frame/image dims come from the dataset)
    d: int = 128
    heads: int = 4
    depth: int = 4
    patch: int = 4
    time_dim: int = 64
    # loop knobs
    recon_weight: float = 1.0
    grad_clip: float = 1.0
    threads: int = 1
    stage2_train_ffn: bool = False
    train_all_groups: bool = False  # set by the one-stage preset
    variant: str = "standard"  # or "repair"
    resume_from: str | None = None
    stop_after: int | None = None  # emit a mid-run checkpoint at this step

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.stage not in (1, 2):
            raise ConfigError("stage must be 1 or 2")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.stage == 2 and self.init_ckpt is None and self.preset != "one-stage":
            raise ConfigError("stage 2 requires an init checkpoint unless preset is one-stage")

    def canonical_text(self) -> str:
        # paths and run-control knobs don't change the trajectory of training
        skip = {"out_path", "log_path", "resume_from", "threads", "stop_after"}
        pairs = []
        for name in sorted(self.__dataclass_fields__):
            if name in skip:
                continue
            pairs.append(f"{name} = {getattr(self, name)}")
        return "\n".join(pairs) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()


def apply_preset(config: TrainConfig) -> TrainConfig:
    """Resolve an ablation preset into concrete loop settings."""
    if config.preset == "none":
        return config
    if config.preset == "pose-only":
        return replace(config, stage=1, init_ckpt=None, variant="standard")
    if config.preset == "one-stage":
        return replace(config, stage=2, init_ckpt=None, train_all_groups=True)
    if config.preset == "longitudinal-data":
        return config  # curation mode checked against the dataset manifest
    if config.preset == "repair-baseline":
        return replace(config, stage=1, init_ckpt=None, variant="repair")
    raise ConfigError(f"unknown preset {config.preset!r}")


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]

    @staticmethod
    def fresh(params: dict[str, torch.Tensor], mask: dict[str, bool]) -> "AdamState":
        zeros = {n: torch.zeros_like(p) for n, p in params.items() if mask[n]}
        return AdamState(0, zeros, {n: z.clone() for n, z in zeros.items()})


def optimizer_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor | None],
    state: AdamState,
    lr: float,
    mask: dict[str, bool],
) -> None:
    """Bias-corrected adaptive-moment update, in place, on trainable params only."""
    state.step += 1
    bc1 = 1.0 - ADAM_BETA1**state.step
    bc2 = 1.0 - ADAM_BETA2**state.step
    with torch.no_grad():
        for name, p in params.items():
            if not mask.get(name, False):
                continue
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {name}")
            m = state.m[name]
            v = state.v[name]
            m.mul_(ADAM_BETA1).add_(g, alpha=1.0 - ADAM_BETA1)
            v.mul_(ADAM_BETA2).addcmul_(g, g, value=1.0 - ADAM_BETA2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(ADAM_EPS), value=-lr)


def clip_gradients(grads: dict[str, torch.Tensor | None], max_norm: float) -> float:
    """Global-norm clipping over present gradients; returns the pre-clip norm."""
    present = [g for g in grads.values() if g is not None]
    if not present:
        return 0.0
    total = torch.sqrt(sum(g.pow(2).sum() for g in present))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in present:
            g.mul_(scale)
    return float(total)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# -- loss pipeline -----------------------------------------------------------


@dataclass
class Batch:
    source: torch.Tensor  # (B,F,3,H,W)
    condition: torch.Tensor
    target: torch.Tensor
    rel: torch.Tensor  # (B,F,3,4)


def compute_batch_loss(
    model: Model,
    batch: Batch,
    t: torch.Tensor,
    x0: torch.Tensor,
    *,
    use_rendering: bool,
    variant: str = "standard",
    recon_weight: float = 1.0,
    detach_data_tokens: bool = True,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Total, flow-matching, and reconstruction losses for one batch.

    ``detach_data_tokens`` treats tokenized data clips as constants for the
    flow-matching term (the training default; the tokenizer then learns only
    from the reconstruction term). The gradient-correctness checks disable it
    so every parameter's analytic gradient is finite-difference comparable.
    """
    maybe = (lambda h: h.detach()) if detach_data_tokens else (lambda h: h)
    b = batch.target.shape[0]
    x1 = maybe(model.patchify(batch.target))
    c_i = model.identity_camera(b)
    emb = model.frame_embedding

    if variant == "repair":
        x_c = maybe(model.patchify(batch.condition))
        x_t = flow.interpolate(x_c, x1, t)
        velocity = flow.target_velocity(x_c, x1)
        x_in = x_t + c_i[:, :, None, :] + emb[None, :, None, :]
        pred = model.forward_stage1(x_in, t)
    else:
        x_s = maybe(model.patchify(batch.source))
        c_r = model.encode_camera(batch.rel)
        x_t = flow.interpolate(x0, x1, t)
        velocity = flow.target_velocity(x0, x1)
        x_i = assemble_input(x_t, x_s, c_r, c_i, emb)
        if use_rendering:
            x_gs = maybe(model.patchify(batch.condition))
            x_gs_bar = assemble_rendering(x_gs, c_r, emb)
            pred = model.forward_stage2(x_i, x_gs_bar, t)
        else:
            pred = model.forward_stage1(x_i, t)

    loss_fm = flow.fm_loss(pred, velocity)
    target_frames = batch.target.to(pred.dtype)
    recon = (model.decode_frames(model.patchify(batch.target)) - target_frames).pow(2).mean()
    return loss_fm + recon_weight * recon, loss_fm, recon


# -- checkpoints -------------------------------------------------------------


def arch_text(config: ModelConfig) -> str:
    keys = ("d", "heads", "depth", "patch", "frames", "height", "width", "time_dim")
    return "".join(f"{k} = {getattr(config, k)}\n" for k in keys)


def arch_hash(config: ModelConfig) -> str:
    return hashlib.sha256(arch_text(config).encode()).hexdigest()


def parse_arch_text(text: str, stage: int) -> ModelConfig:
    kv = {}
    for line in text.strip().split("\n"):
        key, val = line.split(" = ")
        kv[key] = int(val)
    return ModelConfig(stage=stage, **kv)


@dataclass
class Checkpoint:
    arch: ModelConfig
    stage: int
    step: int
    variant: str
    preset: str
    train_config_hash: str
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_step: int
    rng_states: dict[str, np.ndarray]  # name -> uint8 state


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors: list[np.ndarray] = []
    lines = [
        "# pdt-checkpoint v1",
        f"# arch_hash = {arch_hash(ckpt.arch)}",
        f"# train_config_hash = {ckpt.train_config_hash}",
        f"# stage = {ckpt.stage}",
        f"# step = {ckpt.step}",
        f"# adam_step = {ckpt.adam_step}",
        f"# variant = {ckpt.variant}",
        f"# preset = {ckpt.preset}",
    ]
    lines += [f"# arch {ln}" for ln in arch_text(ckpt.arch).strip().split("\n")]

    def add(kind: str, name: str, arr: np.ndarray):
        group = _group_label(kind, name)
        lines.append(f"{len(tensors)},{kind},{name},{group}")
        tensors.append(arr)

    for name in sorted(ckpt.params):
        add("param", name, ckpt.params[name])
    for name in sorted(ckpt.adam_m):
        add("adam_m", name, ckpt.adam_m[name])
    for name in sorted(ckpt.adam_v):
        add("adam_v", name, ckpt.adam_v[name])
    for name in sorted(ckpt.rng_states):
        add("rng", name, ckpt.rng_states[name])
    write_container(path, tensors, "\n".join(lines) + "\n")


def _group_label(kind: str, name: str) -> str:
    if kind == "rng":
        return "-"
    from .net import parameter_group

    return parameter_group(name)


def load_checkpoint(path) -> Checkpoint:
    tensors, text = read_container(path)
    header: dict[str, str] = {}
    arch_lines = []
    records = []
    for line in text.strip().split("\n"):
        if line.startswith("# arch "):
            arch_lines.append(line[len("# arch ") :])
        elif line.startswith("#"):
            key, _, val = line[2:].strip().partition(" = ")
            header[key] = val
        else:
            idx, kind, name, _group = line.split(",")
            records.append((int(idx), kind, name))
    if "arch_hash" not in header or "stage" not in header:
        raise CheckpointError("not a checkpoint container")
    stage = int(header["stage"])
    arch = parse_arch_text("\n".join(arch_lines), stage)
    if header["arch_hash"] != arch_hash(arch):
        raise CheckpointError("architecture hash does not match stored config")
    ckpt = Checkpoint(
        arch=arch,
        stage=stage,
        step=int(header["step"]),
        variant=header.get("variant", "standard"),
        preset=header.get("preset", "none"),
        train_config_hash=header["train_config_hash"],
        params={},
        adam_m={},
        adam_v={},
        adam_step=int(header["adam_step"]),
        rng_states={},
    )
    for idx, kind, name in records:
        arr = tensors[idx]
        if kind == "param":
            ckpt.params[name] = arr
        elif kind == "adam_m":
            ckpt.adam_m[name] = arr
        elif kind == "adam_v":
            ckpt.adam_v[name] = arr
        elif kind == "rng":
            ckpt.rng_states[name] = arr
        else:
            raise CheckpointError(f"unknown tensor kind {kind!r}")
    return ckpt


def model_from_checkpoint(ckpt: Checkpoint, dtype: torch.dtype = torch.float32) -> Model:
    model = Model(ckpt.arch.for_stage(ckpt.stage), seed=0, dtype=dtype)
    own = dict(model.named_parameters())
    missing = set(own) - set(ckpt.params)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:3]} ...")
    with torch.no_grad():
        for name, arr in ckpt.params.items():
            if name not in own:
                raise CheckpointError(f"unexpected parameter {name!r} in checkpoint")
            if tuple(own[name].shape) != arr.shape:
                raise CheckpointError(f"shape mismatch for {name!r}; no silent reshape")
            own[name].copy_(torch.from_numpy(arr.copy()))
    return model


# -- training loop -----------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_rows: list[tuple[int, float, float, int]]  # step, loss, lr, stage
    out_path: str | None


def loss_log_csv(rows: list[tuple[int, float, float, int]]) -> str:
    lines = ["step,loss,lr,stage"]
    lines += [f"{s},{loss!r},{lr!r},{stage}" for s, loss, lr, stage in rows]
    return "\n".join(lines) + "\n"


def _dataset_batch(data: LoadedDataset, idx: torch.Tensor, dtype) -> Batch:
    sel = idx.numpy()
    return Batch(
        source=torch.from_numpy(data.sources[sel]).to(dtype),
        condition=torch.from_numpy(data.conditions[sel]).to(dtype),
        target=torch.from_numpy(data.targets[sel]).to(dtype),
        rel=torch.from_numpy(data.rel_poses[sel]).to(dtype),
    )


def _build_model(config: TrainConfig, data: LoadedDataset) -> Model:
    mf = data.manifest.descriptors[0]
    arch = ModelConfig(
        d=config.d,
        heads=config.heads,
        depth=config.depth,
        patch=config.patch,
        frames=mf.frames,
        height=mf.height,
        width=mf.width,
        time_dim=config.time_dim,
        stage=config.stage,
    )
    if config.stage == 2 and config.init_ckpt is not None:
        init = load_checkpoint(config.init_ckpt)
        if arch_hash(init.arch) != arch_hash(arch):
            raise CheckpointError(
                "init checkpoint architecture does not match the training config"
            )
        if init.stage != 1:
            raise CheckpointError("stage-2 training must start from a stage-1 checkpoint")
        base = model_from_checkpoint(init)
        return extend_to_stage2(base, seed=derive_seed(config.seed, "stage2-init"))
    return Model(arch, seed=derive_seed(config.seed, "init"))


def _trainable(config: TrainConfig, model: Model) -> dict[str, bool]:
    groups = parameter_groups(model)
    mask = trainable_mask(groups, config.stage)
    if config.train_all_groups:
        mask = {name: True for name in mask}
    elif config.stage == 2 and config.stage2_train_ffn:
        mask = {n: m or groups[n] == "ffn_norm" for n, m in mask.items()}
    return mask


def train_stage(config: TrainConfig) -> TrainResult:
    """Run one training stage (or preset variant) and emit checkpoint + loss log."""
    config = apply_preset(config)
    torch.set_num_threads(max(1, config.threads))
    data = load_dataset(config.data_path)
    if config.preset == "longitudinal-data" and data.manifest.mode != "longitudinal":
        raise ConfigError("longitudinal-data preset needs a longitudinal dataset")

    model = _build_model(config, data)
    params = dict(model.named_parameters())
    mask = _trainable(config, model)
    frozen_names = [n for n, trainable in mask.items() if not trainable]
    frozen_before = {n: params[n].detach().clone() for n in frozen_names}

    g_data = torch.Generator().manual_seed(derive_seed(config.seed, f"data-{config.stage}"))
    g_noise = torch.Generator().manual_seed(derive_seed(config.seed, f"noise-{config.stage}"))
    state = AdamState.fresh(params, mask)
    start_step = 0

    if config.resume_from is not None:
        prev = load_checkpoint(config.resume_from)
        if prev.train_config_hash != config.config_hash():
            raise CheckpointError("resume checkpoint was produced by a different config")
        model = model_from_checkpoint(prev)
        params = dict(model.named_parameters())
        mask = _trainable(config, model)
        frozen_before = {
            n: params[n].detach().clone() for n, trainable in mask.items() if not trainable
        }
        state = AdamState(
            prev.adam_step,
            {n: torch.from_numpy(a.copy()) for n, a in prev.adam_m.items()},
            {n: torch.from_numpy(a.copy()) for n, a in prev.adam_v.items()},
        )
        g_data.set_state(torch.from_numpy(prev.rng_states["data"].copy()))
        g_noise.set_state(torch.from_numpy(prev.rng_states["noise"].copy()))
        start_step = prev.step

    for name, p in params.items():
        p.requires_grad_(mask[name])  # skip grad accumulation on frozen groups

    dtype = torch.float32
    use_rendering = config.stage == 2
    cfg_model = model.config
    rows: list[tuple[int, float, float, int]] = []
    end_step = config.steps if config.stop_after is None else min(config.steps, config.stop_after)

    for step in range(start_step, end_step):
        lr = cosine_lr(config.lr, step, config.steps)
        idx = torch.randint(0, len(data), (config.batch_size,), generator=g_data)
        batch = _dataset_batch(data, idx, dtype)
        t = torch.rand(config.batch_size, generator=g_noise)
        x0 = torch.randn(
            (config.batch_size, cfg_model.frames, cfg_model.tokens_per_frame, cfg_model.d),
            generator=g_noise,
            dtype=dtype,
        )
        total, _, _ = compute_batch_loss(
            model,
            batch,
            t,
            x0,
            use_rendering=use_rendering,
            variant=config.variant,
            recon_weight=config.recon_weight,
        )
        if not torch.isfinite(total):
            raise NumericError(
                f"non-finite loss at step {step} (stage {config.stage}, seed {config.seed})"
            )
        model.zero_grad(set_to_none=True)
        total.backward()
        grads = {n: (p.grad if mask[n] else None) for n, p in params.items()}
        clip_gradients(grads, config.grad_clip)
        optimizer_step(params, grads, state, lr, mask)
        rows.append((step, float(total.detach()), lr, config.stage))

    for name, before in frozen_before.items():
        if not torch.equal(params[name], before):
            raise NumericError(f"frozen parameter {name} changed during training")

    ckpt = Checkpoint(
        arch=model.config,
        stage=config.stage,
        step=end_step,
        variant=config.variant,
        preset=config.preset,
        train_config_hash=config.config_hash(),
        params={n: p.detach().numpy().copy() for n, p in params.items()},
        adam_m={n: m.numpy().copy() for n, m in state.m.items()},
        adam_v={n: v.numpy().copy() for n, v in state.v.items()},
        adam_step=state.step,
        rng_states={
            "data": g_data.get_state().numpy().copy(),
            "noise": g_noise.get_state().numpy().copy(),
        },
    )
    if config.out_path:
        save_checkpoint(config.out_path, ckpt)
    if config.log_path:
        Path(config.log_path).write_text(loss_log_csv(rows))
    return TrainResult(ckpt, rows, config.out_path)
