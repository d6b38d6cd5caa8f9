"""Command-line entry point.

Commands:

    gen-data      build a training dataset container
    train         run one training stage (or an ablation preset arm)
    sample        generate a clip from a checkpoint and write pixmaps
    eval          score a checkpoint on held-out scenes
    ablate        run a matched train+eval comparison pair
    render-debug  render a scene/offset/level without any model
    dump-splats   write a scene's splats as CSV

Settings resolve from (lowest to highest precedence): built-in defaults, a
``key = value`` config file (--config), environment variables prefixed
``RECAM_`` (upper-cased key), then command-line flags. Unknown config-file
keys are rejected. Every run logs its resolved configuration to stderr.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

from . import evalkit, flow
from .curation import DatasetConfig, build_dataset, build_inference_pair, make_intrinsics
from .errors import RetrajError
from .geometry import lateral_offset_trajectory
from .renderer import FidelityLevel, degrade_scene, render_clip, write_clip_ppm
from .scene import SceneParams, dump_splats_csv, generate_scene, generate_trajectory
from .trainkit import TrainConfig, load_checkpoint, train_stage

log = logging.getLogger("retraj")

ENV_PREFIX = "RECAM_"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors must exit 1, not argparse's 2
        raise UsageError(message)


def parse_bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in str(text).split(",") if x != "")


def parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(text).split(",") if x != "")


@dataclass(frozen=True)
class Opt:
    key: str
    type: Callable[[str], Any]
    default: Any
    help: str
    required: bool = False


COMMON = [
    Opt("seed", int, 0, "master seed; all randomness derives from it"),
    Opt("threads", int, 1, "torch threads (1 gives bitwise reproducibility)"),
]

DATA_OPTS = [
    Opt("scenes", int, 8, "number of training scenes"),
    Opt("offsets", parse_floats, (1.0, 2.0, 3.0, 4.0), "lateral offset magnitudes (m)"),
    Opt("levels", parse_ints, (1, 2, 3), "condition degradation levels"),
    Opt("frames", int, 8, "frames per clip"),
    Opt("height", int, 32, "image height (px)"),
    Opt("width", int, 48, "image width (px)"),
    Opt("splats", int, 2000, "splats per scene"),
    Opt("mode", str, "lateral", "curation mode: lateral | longitudinal"),
    Opt("speed", float, 0.5, "camera speed (m/frame)"),
    Opt("curvature", float, 0.0, "trajectory yaw rate (rad/frame)"),
]

MODEL_OPTS = [
    Opt("d", int, 128, "token channel width"),
    Opt("heads", int, 4, "attention heads"),
    Opt("depth", int, 4, "transformer blocks"),
    Opt("patch", int, 4, "patch size"),
    Opt("time_dim", int, 64, "time embedding width"),
]

TRAIN_OPTS = [
    Opt("stage", int, 1, "training stage (1 or 2)"),
    Opt("data", str, None, "dataset container path", required=True),
    Opt("steps", int, 2000, "optimizer steps"),
    Opt("batch", int, 4, "batch size"),
    Opt("lr", float, 1e-3, "peak learning rate (cosine decay)"),
    Opt("init", str, None, "stage-1 checkpoint for stage-2 init"),
    Opt("preset", str, "none", "ablation preset"),
    Opt("recon_weight", float, 1.0, "tokenizer reconstruction loss weight"),
    Opt("log", str, None, "loss log CSV path"),
    Opt("stop_after", int, None, "stop at this step (mid-run checkpoint)"),
    Opt("resume", str, None, "resume from this checkpoint"),
    Opt("out", str, None, "output checkpoint path", required=True),
]

EVAL_OPTS = [
    Opt("ckpt", str, None, "checkpoint to evaluate", required=True),
    Opt("scenes_held_out", int, 5, "number of held-out scenes"),
    Opt("seed_base", int, 10000, "first held-out scene seed (>= 10000)"),
    Opt("offsets", parse_floats, (1.0, 2.0, 3.0), "offset magnitudes to evaluate"),
    Opt("splats", int, 2000, "splats per eval scene"),
    Opt("sample_steps", int, 16, "sampler Euler steps"),
    Opt("degrade_source", parse_bool, False, "use degraded source clips at inference"),
    Opt("report", str, None, "report CSV path", required=True),
]


def _add_options(parser: argparse.ArgumentParser, options: list[Opt]) -> None:
    for opt in options:
        flag = "--" + opt.key.replace("_", "-")
        parser.add_argument(flag, dest=opt.key, type=str, default=None, help=opt.help)


def _read_config_file(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    values = {}
    for raw in Path(path).read_text().split("\n"):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"malformed config line: {raw!r}")
        key, _, val = line.partition("=")
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def resolve_options(
    options: list[Opt], ns: argparse.Namespace, file_values: dict[str, str]
) -> dict[str, Any]:
    known = {opt.key for opt in options}
    unknown = set(file_values) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    resolved = {}
    for opt in options:
        raw = getattr(ns, opt.key, None)
        if raw is None:
            raw = os.environ.get(ENV_PREFIX + opt.key.upper())
        if raw is None:
            raw = file_values.get(opt.key)
        if raw is None:
            value = opt.default
        else:
            try:
                value = opt.type(raw)
            except (ValueError, TypeError) as exc:
                raise UsageError(f"bad value for {opt.key}: {raw!r} ({exc})")
        if value is None and opt.required:
            raise UsageError(f"missing required option --{opt.key.replace('_', '-')}")
        resolved[opt.key] = value
    for key, value in sorted(resolved.items()):
        log.info("config: %s = %s", key, value)
    return resolved


# -- commands ----------------------------------------------------------------


def cmd_gen_data(cfg: dict) -> int:
    config = DatasetConfig(
        out_path=cfg["out"],
        scene_count=cfg["scenes"],
        base_seed=cfg["seed"],
        offsets=cfg["offsets"],
        levels=cfg["levels"],
        mode=cfg["mode"],
        frames=cfg["frames"],
        height=cfg["height"],
        width=cfg["width"],
        splat_count=cfg["splats"],
        speed=cfg["speed"],
        curvature=cfg["curvature"],
    )
    manifest = build_dataset(config)
    log.info(
        "wrote %s: %d triples (%s mode), config hash %s",
        cfg["out"],
        manifest.triple_count,
        manifest.mode,
        manifest.config_hash[:12],
    )
    return 0


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        data_path=cfg["data"],
        stage=cfg["stage"],
        steps=cfg["steps"],
        batch_size=cfg["batch"],
        lr=cfg["lr"],
        seed=cfg["seed"],
        init_ckpt=cfg["init"],
        preset=cfg["preset"],
        out_path=cfg["out"],
        log_path=cfg["log"],
        d=cfg["d"],
        heads=cfg["heads"],
        depth=cfg["depth"],
        patch=cfg["patch"],
        time_dim=cfg["time_dim"],
        recon_weight=cfg["recon_weight"],
        threads=cfg["threads"],
        stop_after=cfg["stop_after"],
        resume_from=cfg["resume"],
    )


def cmd_train(cfg: dict) -> int:
    result = train_stage(_train_config(cfg))
    final = result.loss_rows[-1][1] if result.loss_rows else float("nan")
    log.info("trained %d steps, final loss %.6f -> %s", result.checkpoint.step, final, cfg["out"])
    return 0


def cmd_sample(cfg: dict) -> int:
    torch.set_num_threads(max(1, cfg["threads"]))
    ckpt = load_checkpoint(cfg["ckpt"])
    params = SceneParams(
        splat_count=cfg["splats"],
        trajectory_length=ckpt.arch.frames,
        speed=cfg["speed"],
        curvature=cfg["curvature"],
    )
    scene = generate_scene(cfg["scene_seed"], params)
    traj = generate_trajectory(cfg["scene_seed"], params)
    intr = make_intrinsics(ckpt.arch.width, ckpt.arch.height)
    pair = build_inference_pair(scene, traj, intr, cfg["delta"])
    generator = evalkit.checkpoint_generator(ckpt)
    ctx = evalkit.EvalContext(
        scene=scene,
        recorded_traj=traj,
        intr=intr,
        delta=cfg["delta"],
        pair=pair,
        ground_truth=render_clip(scene, lateral_offset_trajectory(traj, cfg["delta"]), intr),
        sample_seed=cfg["seed"],
        sample_steps=cfg["sample_steps"],
    )
    generated = generator(ctx)
    out = Path(cfg["out"])
    write_clip_ppm(generated, out, "generated")
    write_clip_ppm(ctx.ground_truth, out, "ground_truth")
    write_clip_ppm(pair.condition, out, "condition")
    write_clip_ppm(
        evalkit.side_by_side(generated, ctx.ground_truth, pair.condition), out, "combined"
    )
    log.info("wrote %d frames to %s", generated.frame_count, out)
    return 0


def cmd_eval(cfg: dict) -> int:
    torch.set_num_threads(max(1, cfg["threads"]))
    ckpt = load_checkpoint(cfg["ckpt"])
    config = evalkit.EvalConfig(
        scene_count=cfg["scenes_held_out"],
        scene_seed_base=cfg["seed_base"],
        offsets=cfg["offsets"],
        splat_count=cfg["splats"],
        sample_steps=cfg["sample_steps"],
        seed=cfg["seed"],
        degrade_source=cfg["degrade_source"],
        report_path=cfg["report"],
    )
    report = evalkit.run_eval(ckpt, config)
    log.info(
        "eval: %d rows, median psnr %.2f dB, median terr %.3f m -> %s",
        len(report.rows),
        report.median("psnr_db"),
        report.median("terr_m"),
        cfg["report"],
    )
    return 0


def cmd_render_debug(cfg: dict) -> int:
    params = SceneParams(
        splat_count=cfg["splats"],
        trajectory_length=cfg["frames"],
        speed=cfg["speed"],
        curvature=cfg["curvature"],
    )
    scene = generate_scene(cfg["scene_seed"], params)
    traj = generate_trajectory(cfg["scene_seed"], params)
    if cfg["delta"] != 0.0:
        traj = lateral_offset_trajectory(traj, cfg["delta"])
    level = FidelityLevel.preset(cfg["level"])
    scene = degrade_scene(scene, level, cfg["scene_seed"])
    clip = render_clip(scene, traj, make_intrinsics(cfg["width"], cfg["height"]))
    write_clip_ppm(clip, Path(cfg["out"]), "frame")
    log.info("wrote %d frames to %s", clip.frame_count, cfg["out"])
    return 0


def cmd_dump_splats(cfg: dict) -> int:
    params = SceneParams(splat_count=cfg["splats"], trajectory_length=cfg["frames"])
    scene = generate_scene(cfg["scene_seed"], params)
    Path(cfg["out"]).write_text(dump_splats_csv(scene))
    log.info("wrote %d splats to %s", len(scene), cfg["out"])
    return 0


# -- ablation driver ---------------------------------------------------------

ABLATE_PRESETS = (
    "pose-only",
    "one-stage",
    "longitudinal",
    "repair-baseline",
    "clean-vs-degraded-source",
)


def _train_two_stage(data: str, cfg: dict, seed: int, workdir: Path, tag: str) -> str:
    s1 = str(workdir / f"{tag}_s1_{seed}.ckpt")
    s2 = str(workdir / f"{tag}_s2_{seed}.ckpt")
    base = dict(
        data_path=data,
        batch_size=cfg["batch"],
        lr=cfg["lr"],
        seed=seed,
        d=cfg["d"],
        heads=cfg["heads"],
        depth=cfg["depth"],
        patch=cfg["patch"],
        time_dim=cfg["time_dim"],
        threads=cfg["threads"],
    )
    train_stage(TrainConfig(stage=1, steps=cfg["steps"], out_path=s1, **base))
    train_stage(TrainConfig(stage=2, steps=cfg["steps"], init_ckpt=s1, out_path=s2, **base))
    return s2


def _train_preset_arm(data: str, cfg: dict, seed: int, workdir: Path, preset: str) -> str:
    out = str(workdir / f"{preset}_{seed}.ckpt")
    base = dict(
        data_path=data,
        batch_size=cfg["batch"],
        lr=cfg["lr"],
        seed=seed,
        d=cfg["d"],
        heads=cfg["heads"],
        depth=cfg["depth"],
        patch=cfg["patch"],
        time_dim=cfg["time_dim"],
        threads=cfg["threads"],
    )
    if preset == "longitudinal":
        # two-stage pipeline on longitudinally curated data, same per-stage budget
        s1 = str(workdir / f"longit_s1_{seed}.ckpt")
        train_stage(
            TrainConfig(stage=1, steps=cfg["steps"], preset="longitudinal-data",
                        out_path=s1, **base)
        )
        train_stage(
            TrainConfig(stage=2, steps=cfg["steps"], init_ckpt=s1,
                        preset="longitudinal-data", out_path=out, **base)
        )
        return out
    if preset in ("pose-only", "one-stage", "repair-baseline"):
        # single run at the two-stage arm's total budget
        train_stage(TrainConfig(preset=preset, steps=2 * cfg["steps"], out_path=out, **base))
        return out
    raise UsageError(f"unknown ablation arm {preset!r}")


def _eval_rows(ckpt_path: str, cfg: dict, degrade_source=False) -> list[evalkit.EvalRow]:
    ckpt = load_checkpoint(ckpt_path)
    config = evalkit.EvalConfig(
        scene_count=cfg["eval_scenes"],
        offsets=cfg["eval_offsets"],
        splat_count=cfg["splats"],
        sample_steps=cfg["sample_steps"],
        seed=cfg["seed"],
        degrade_source=degrade_source,
    )
    return evalkit.run_eval(ckpt, config).rows


def _medians(rows: list[evalkit.EvalRow]) -> dict[str, float]:
    return {
        "psnr_db": float(np.median([r.psnr_db for r in rows])),
        "terr_m": float(np.median([r.terr_m for r in rows])),
        "tconsist": float(np.median([r.tconsist for r in rows])),
    }


def write_comparison_csv(path, label_a: str, label_b: str, a: dict, b: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", label_a, label_b, "delta"])
        for metric in sorted(a):
            writer.writerow([metric, repr(a[metric]), repr(b[metric]), repr(a[metric] - b[metric])])


def cmd_ablate(cfg: dict) -> int:
    torch.set_num_threads(max(1, cfg["threads"]))
    preset = cfg["preset"]
    if preset not in ABLATE_PRESETS:
        raise UsageError(f"preset must be one of {ABLATE_PRESETS}")
    workdir = Path(cfg["out"])
    workdir.mkdir(parents=True, exist_ok=True)

    data_lateral = str(workdir / "data_lateral.pdt")
    build_dataset(
        DatasetConfig(
            out_path=data_lateral,
            scene_count=cfg["scenes"],
            base_seed=cfg["seed"],
            offsets=cfg["offsets"],
            levels=cfg["levels"],
            frames=cfg["frames"],
            height=cfg["height"],
            width=cfg["width"],
            splat_count=cfg["splats"],
        )
    )
    seeds = cfg["seeds"]

    if preset == "clean-vs-degraded-source":
        rows_a, rows_b = [], []
        for seed in seeds:
            ckpt = _train_two_stage(data_lateral, cfg, seed, workdir, "full")
            rows_a += _eval_rows(ckpt, cfg, degrade_source=False)
            rows_b += _eval_rows(ckpt, cfg, degrade_source=True)
        write_comparison_csv(
            workdir / "comparison.csv", "clean_source", "degraded_source",
            _medians(rows_a), _medians(rows_b),
        )
        log.info("comparison written to %s", workdir / "comparison.csv")
        return 0

    data_b = data_lateral
    if preset == "longitudinal":
        data_b = str(workdir / "data_longitudinal.pdt")
        build_dataset(
            DatasetConfig(
                out_path=data_b,
                scene_count=cfg["scenes"],
                base_seed=cfg["seed"],
                offsets=cfg["offsets"],
                levels=cfg["levels"],
                mode="longitudinal",
                frames=cfg["frames"],
                height=cfg["height"],
                width=cfg["width"],
                splat_count=cfg["splats"],
            )
        )

    rows_ours, rows_base = [], []
    for seed in seeds:
        ours = _train_two_stage(data_lateral, cfg, seed, workdir, "full")
        rows_ours += _eval_rows(ours, cfg)
        baseline = _train_preset_arm(data_b, cfg, seed, workdir, preset)
        rows_base += _eval_rows(baseline, cfg)
    write_comparison_csv(
        workdir / "comparison.csv", "ours", preset, _medians(rows_ours), _medians(rows_base)
    )
    log.info("comparison written to %s", workdir / "comparison.csv")
    return 0


# -- wiring ------------------------------------------------------------------

SAMPLE_OPTS = [
    Opt("ckpt", str, None, "checkpoint path", required=True),
    Opt("scene_seed", int, 10000, "scene seed to sample"),
    Opt("delta", float, 3.0, "lateral offset (m)"),
    Opt("sample_steps", int, 16, "sampler Euler steps"),
    Opt("splats", int, 2000, "splats per scene"),
    Opt("speed", float, 0.5, "camera speed (m/frame)"),
    Opt("curvature", float, 0.0, "trajectory yaw rate (rad/frame)"),
    Opt("out", str, None, "output directory for pixmaps", required=True),
]

RENDER_DEBUG_OPTS = [
    Opt("scene_seed", int, 0, "scene seed"),
    Opt("delta", float, 0.0, "lateral offset (m)"),
    Opt("level", int, 0, "degradation level 0-3"),
    Opt("frames", int, 8, "frames"),
    Opt("height", int, 32, "image height"),
    Opt("width", int, 48, "image width"),
    Opt("splats", int, 2000, "splats per scene"),
    Opt("speed", float, 0.5, "camera speed (m/frame)"),
    Opt("curvature", float, 0.0, "trajectory yaw rate (rad/frame)"),
    Opt("out", str, None, "output directory", required=True),
]

DUMP_OPTS = [
    Opt("scene_seed", int, 0, "scene seed"),
    Opt("splats", int, 2000, "splats per scene"),
    Opt("frames", int, 8, "frames (affects bounds only)"),
    Opt("out", str, None, "output CSV path", required=True),
]

ABLATE_OPTS = [
    Opt("preset", str, None, "ablation preset", required=True),
    Opt("scenes", int, 4, "training scenes"),
    Opt("offsets", parse_floats, (1.0, 2.0, 3.0), "offset magnitudes"),
    Opt("levels", parse_ints, (1, 2, 3), "condition levels"),
    Opt("frames", int, 6, "frames per clip"),
    Opt("height", int, 16, "image height"),
    Opt("width", int, 24, "image width"),
    Opt("splats", int, 1200, "splats per scene"),
    Opt("steps", int, 300, "steps per stage (baselines get 2x)"),
    Opt("batch", int, 4, "batch size"),
    Opt("lr", float, 1e-3, "learning rate"),
    Opt("d", int, 48, "token width"),
    Opt("heads", int, 4, "attention heads"),
    Opt("depth", int, 2, "transformer blocks"),
    Opt("patch", int, 4, "patch size"),
    Opt("time_dim", int, 32, "time embedding width"),
    Opt("seeds", parse_ints, (1,), "training seeds"),
    Opt("eval_scenes", int, 3, "held-out scenes"),
    Opt("eval_offsets", parse_floats, (1.0, 2.0, 3.0), "eval offset magnitudes"),
    Opt("sample_steps", int, 16, "sampler steps"),
    Opt("out", str, None, "working/output directory", required=True),
]

COMMANDS: dict[str, tuple[list[Opt], Callable[[dict], int]]] = {
    "gen-data": (COMMON + DATA_OPTS + [Opt("out", str, None, "output container", required=True)], cmd_gen_data),
    "train": (COMMON + MODEL_OPTS + TRAIN_OPTS, cmd_train),
    "sample": (COMMON + SAMPLE_OPTS, cmd_sample),
    "eval": (COMMON + EVAL_OPTS, cmd_eval),
    "ablate": (COMMON + ABLATE_OPTS, cmd_ablate),
    "render-debug": (COMMON + RENDER_DEBUG_OPTS, cmd_render_debug),
    "dump-splats": (COMMON + DUMP_OPTS, cmd_dump_splats),
}


def build_parser() -> _Parser:
    parser = _Parser(prog="retraj", description=__doc__)
    sub = parser.add_subparsers(dest="command")
    for name, (options, _) in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key = value config file")
        _add_options(p, options)
    return parser


def run(argv: list[str]) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            parser.print_help(sys.stderr)
            return 1
        options, handler = COMMANDS[ns.command]
        file_values = _read_config_file(ns.config)
        cfg = resolve_options(options, ns, file_values)
        return handler(cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (RetrajError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
