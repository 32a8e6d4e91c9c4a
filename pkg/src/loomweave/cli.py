"""Command-line entry point: ``loomweave <subcommand> ...``.

Run settings come from ``--config <file>`` (key=value text) and may be
overridden by one flag per config key, e.g. ``--train-steps 500``.
"""

from __future__ import annotations

import argparse
import struct
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .config import RunConfig
from .diffusion import SamplerConfig, q_sample, sample_multiview
from .geometry import CameraPose
from .scenes import DatasetManifest, build_dataset, to_uint8
from .splatting import ORIENTATIONS, Orientation
from .train import (
    CHECKPOINT_NAME,
    build_model,
    deterministic_requested,
    draw_batch,
    evaluate,
    load_model,
    load_scenes,
    set_deterministic,
    train,
)

ABLATIONS = ("reference", "lt_all_layers", "mean_fusion", "half_m", "no_pe")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value run config file")
    g = p.add_argument_group("config overrides")
    for f in fields(RunConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", metavar="VALUE")


def _config(args) -> RunConfig:
    base = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {
        f.name: getattr(args, f"cfg_{f.name}") for f in fields(RunConfig) if getattr(args, f"cfg_{f.name}") is not None
    }
    return RunConfig.from_strings(overrides, base)


def _checkpoint(args, cfg: RunConfig) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg.output) / CHECKPOINT_NAME


def cmd_gen_data(args) -> int:
    manifest = DatasetManifest(
        num_scenes=args.scenes,
        views_per_scene=args.views,
        resolution=args.resolution,
        elevation_mode=args.elevation_mode,
        azimuth=args.azimuth,
        radius=args.radius,
        seed=args.seed,
        supersample=args.supersample,
    )
    root = build_dataset(manifest, args.out, workers=args.workers)
    print(f"wrote {manifest.num_scenes} scenes x {manifest.views_per_scene} views to {root}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    result = train(cfg, resume=not args.fresh)
    print(f"trained to step {result.step}; log {result.log_path}; checkpoint {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else Path(cfg.output)
    report = evaluate(_checkpoint(args, cfg), cfg, out_dir=out)
    sys.stdout.write(report.table())
    return 0


def _parse_views(spec: str) -> list[tuple[float, float]]:
    views = []
    for item in spec.split(","):
        elev, _, azim = item.partition(":")
        views.append((float(elev), float(azim)))
    return views


def cmd_sample(args) -> int:
    cfg = _config(args)
    model = load_model(_checkpoint(args, cfg), cfg)
    img = np.asarray(Image.open(args.reference).convert("RGB"), dtype=np.float64) / 255.0
    size = cfg.to_model_config().image_size
    if img.shape[:2] != (size, size):
        raise ValueError(f"reference image must be {size}x{size}, got {img.shape[1]}x{img.shape[0]}")
    ref_pose = CameraPose.from_spherical(args.reference_elevation, args.reference_azimuth, args.radius)
    targets = [CameraPose.from_spherical(e, a, args.radius) for e, a in _parse_views(args.views)]
    poses = [ref_pose] + targets
    seed = cfg.seed if args.sample_seed is None else args.sample_seed
    out = sample_multiview(
        model, cfg.schedule(), img, poses, SamplerConfig(cfg.sampler, cfg.sampler_steps), seed, ref_pose
    )
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    for k, view in enumerate(out[1:], 1):
        Image.fromarray(to_uint8(view), mode="RGB").save(d / f"sample_{k}.png")
    print(f"wrote {len(targets)} views to {d}")
    return 0


def write_plane(path_stem: Path, orientation: Orientation, grid: np.ndarray) -> Path:
    """Binary blob: int32 LE (tag, H, W, C) then float32 row-major data; PNGs of channels 0-2."""
    grid = np.ascontiguousarray(grid, dtype="<f4")
    h, w, c = grid.shape
    path = path_stem.with_name(f"{path_stem.name}_{orientation.value}.bin")
    with path.open("wb") as fh:
        fh.write(struct.pack("<4i", orientation.tag, h, w, c))
        fh.write(grid.tobytes(order="C"))
    for ch in range(min(3, c)):
        x = grid[..., ch].astype(np.float64)
        lo, hi = x.min(), x.max()
        x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
        Image.fromarray(to_uint8(x), mode="L").save(path.with_name(f"{path.stem}_c{ch}.png"))
    return path


def read_plane(path) -> tuple[int, np.ndarray]:
    data = Path(path).read_bytes()
    tag, h, w, c = struct.unpack("<4i", data[:16])
    grid = np.frombuffer(data[16:], dtype="<f4")
    if grid.size != h * w * c:
        raise ValueError(f"{path}: payload holds {grid.size} floats, header says {h}x{w}x{c}")
    return tag, grid.reshape(h, w, c)


def cmd_dump_triplane(args) -> int:
    cfg = _config(args)
    model = load_model(_checkpoint(args, cfg), cfg)
    scenes = load_scenes(cfg)
    one = replace(cfg, batch_size=1)
    batch = draw_batch([scenes[args.scene]], one, step=0)
    t = torch.tensor([args.timestep])
    noisy = q_sample(cfg.schedule(), batch.clean, t, batch.noise)
    capture: list = []
    with torch.no_grad():
        model.eval()
        model(noisy, t, batch.reference, batch.poses, capture=capture)
    site = capture[args.site]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for o in ORIENTATIONS:
        if args.stage == "woven":
            written.append(write_plane(out / "woven", o, site["planes"][o][0].numpy()))
        else:
            grids = site["splat"][o][0][0]  # (N, H, W, C) of the first scene
            for v in range(grids.shape[0]):
                written.append(write_plane(out / f"splat_view{v}", o, grids[v].numpy()))
    print("\n".join(str(p) for p in written))
    return 0


def ablation_config(cfg: RunConfig, name: str) -> RunConfig:
    """One row of the ablation grid, each changing a single axis of ``cfg``."""
    out = str(Path(cfg.output) / name)
    if name == "reference":
        return replace(cfg, output=out)
    if name == "lt_all_layers":
        return replace(cfg, render_sites="all", output=out)
    if name == "mean_fusion":
        return replace(cfg, fusion_mode="mean", output=out)
    if name == "half_m":
        m = cfg.to_model_config().m_samples
        return replace(cfg, m_samples=max(1, m // 2), output=out)
    if name == "no_pe":
        return replace(cfg, use_pe=False, output=out)
    raise ValueError(f"unknown ablation {name!r}")


def run_ablations(cfg: RunConfig, names: Sequence[str] = ABLATIONS, scenes=None, emit=print) -> dict[str, tuple[float, float]]:
    scenes = scenes if scenes is not None else load_scenes(cfg)
    results = {}
    emit(f"{'variant':<16}{'psnr_db':>10}{'ssim':>10}")
    for name in names:
        vcfg = ablation_config(cfg, name)
        res = train(vcfg, scenes=scenes)
        report = evaluate(res.checkpoint_path, vcfg, scenes=scenes, out_dir=vcfg.output)
        results[name] = (report.mean_psnr, report.mean_ssim)
        emit(f"{name:<16}{report.mean_psnr:>10.3f}{report.mean_ssim:>10.4f}")
    return results


def cmd_ablate(args) -> int:
    cfg = _config(args)
    names = args.variants.split(",") if args.variants else list(ABLATIONS)
    bad = [n for n in names if n not in ABLATIONS]
    if bad:
        raise ValueError(f"unknown variants {bad}; choose from {', '.join(ABLATIONS)}")
    lines: list[str] = []

    def emit(line):
        print(line, flush=True)
        lines.append(line)

    run_ablations(cfg, names, emit=emit)
    Path(cfg.output).mkdir(parents=True, exist_ok=True)
    (Path(cfg.output) / "ablation.txt").write_text("\n".join(lines) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loomweave", description="Shared-triplane multi-view diffusion at desk scale.")
    parser.add_argument("--seed", type=int, help="overrides the config seed (and the gen-data seed)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic multi-view dataset")
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--out", default="dataset")
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--elevation-mode", choices=("fixed", "variable"), default="fixed")
    p.add_argument("--azimuth", choices=("random", "even"), default="random")
    p.add_argument("--radius", type=float, default=2.0)
    p.add_argument("--supersample", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train (resuming from the output directory if possible)")
    _add_config_flags(p)
    p.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="sample held-in scenes conditioned on view 0 and score them")
    _add_config_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="report directory (default: the run output)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="generate novel views from one reference image")
    _add_config_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--reference", required=True, help="reference PNG")
    p.add_argument("--reference-elevation", type=float, default=30.0)
    p.add_argument("--reference-azimuth", type=float, default=0.0)
    p.add_argument("--radius", type=float, default=2.0)
    p.add_argument("--views", required=True, help="target cameras as elev:azim,elev:azim,...")
    p.add_argument("--sample-seed", type=int)
    p.add_argument("--out", default="samples")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("dump-triplane", help="export triplane grids of one scene to binary + PNG")
    _add_config_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--timestep", type=int, default=1, help="noise level of the input views (>= 1)")
    p.add_argument("--site", type=int, default=-1)
    p.add_argument("--stage", choices=("woven", "splat"), default="woven")
    p.add_argument("--out", default="triplane_dump")
    p.set_defaults(func=cmd_dump_triplane)

    p = sub.add_parser("ablate", help="train and evaluate the ablation grid")
    _add_config_flags(p)
    p.add_argument("--variants", help=f"comma-separated subset of {','.join(ABLATIONS)}")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gen-data":
        args.seed = 0 if args.seed is None else args.seed
    elif args.seed is not None and args.cfg_seed is None:
        args.cfg_seed = str(args.seed)
    if deterministic_requested():
        set_deterministic(True)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, PermissionError, OSError) as exc:
        print(f"loomweave {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
