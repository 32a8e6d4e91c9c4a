"""Training loop, checkpoints and evaluation.

Every random draw of step ``k`` comes from ``numpy.random.default_rng([seed, k])``,
so a run resumed from a checkpoint replays the same batches as an
uninterrupted one. Checkpoints are ``.npz`` files holding a small manifest,
the model parameters and the Adam state.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .backbone import LoomBackbone, ViewPoses
from .config import RunConfig
from .diffusion import Batch, SamplerConfig, image_to_latent, latent_to_image, sample_latents, total_loss
from .metrics import IDENTICAL, format_psnr, psnr, ssim
from .scenes import SceneData, load_dataset

CHECKPOINT_VERSION = 1
CHECKPOINT_NAME = "checkpoint.npz"
LOG_NAME = "metrics.log"
LOG_PATTERN = re.compile(r"^step=(\d+) loss=(\S+) tv=(\S+) psnr=(\S+)$")


def deterministic_requested() -> bool:
    return os.environ.get("LOOMWEAVE_DETERMINISTIC", "") == "1"


def set_deterministic(enabled: bool = True) -> None:
    """Deterministic kernels and a single intra-op thread."""
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


def build_model(config: RunConfig) -> LoomBackbone:
    torch.manual_seed(config.seed)
    return LoomBackbone(config.to_model_config())


def load_scenes(config: RunConfig) -> list[SceneData]:
    root = Path(config.dataset)
    if not (root / "manifest.txt").is_file():
        raise FileNotFoundError(f"dataset not found at {root} (run gen-data first)")
    _, scenes = load_dataset(root)
    if config.scenes:
        if config.scenes > len(scenes):
            raise ValueError(f"config asks for {config.scenes} scenes, dataset has {len(scenes)}")
        scenes = scenes[: config.scenes]
    short = [s.scene_id for s in scenes if len(s.cameras) < config.num_views]
    if short:
        raise ValueError(f"scenes {short} have fewer than {config.num_views} views")
    return scenes


def draw_batch(scenes: Sequence[SceneData], config: RunConfig, step: int, dtype=torch.float32) -> Batch:
    """The batch of ``step``: scenes, N views each (first one is the reference), timesteps and noise."""
    rng = np.random.default_rng([config.seed, step])
    n = config.num_views
    picks = rng.integers(0, len(scenes), config.batch_size)
    clean, poses = [], []
    for i in picks:
        s = scenes[int(i)]
        views = np.sort(rng.choice(len(s.cameras), n, replace=False))
        clean.append(s.images[views])
        poses.append([s.cameras[int(v)].pose for v in views])
    t_max = config.to_model_config().num_steps
    timesteps = torch.as_tensor(rng.integers(1, t_max + 1, config.batch_size))
    clean = image_to_latent(np.stack(clean)).permute(0, 1, 4, 2, 3).to(dtype)
    noise = torch.as_tensor(rng.standard_normal(clean.shape)).to(dtype)
    return Batch(clean, clean[:, 0], ViewPoses.from_cameras(poses).to(dtype), timesteps, noise)


# ---- checkpoints ----


def save_checkpoint(path, model: LoomBackbone, optimizer: torch.optim.Optimizer, config: RunConfig, step: int) -> None:
    arrays = {
        "manifest/format_version": np.array(CHECKPOINT_VERSION),
        "manifest/config_hash": np.array(config.model_hash()),
        "manifest/step": np.array(step),
        "manifest/config": np.array(config.to_text()),
    }
    for name, p in model.state_dict().items():
        arrays[f"param/{name}"] = p.detach().cpu().numpy()
    names = {id(p): n for n, p in model.named_parameters()}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            arrays[f"adam/{n}/step"] = np.array(float(st["step"]))
            arrays[f"adam/{n}/exp_avg"] = st["exp_avg"].cpu().numpy()
            arrays[f"adam/{n}/exp_avg_sq"] = st["exp_avg_sq"].cpu().numpy()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    step: int
    config_hash: str
    config_text: str
    params: dict[str, np.ndarray]
    adam: dict[str, dict[str, np.ndarray]]


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except Exception as exc:
        raise ValueError(f"checkpoint {path} is corrupt or unreadable: {exc}") from None
    try:
        version = int(arrays["manifest/format_version"])
        step = int(arrays["manifest/step"])
        chash = str(arrays["manifest/config_hash"])
        ctext = str(arrays["manifest/config"])
    except KeyError as exc:
        raise ValueError(f"checkpoint {path} lacks manifest entry {exc}") from None
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint {path} has format version {version}, expected {CHECKPOINT_VERSION}")
    params = {k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")}
    adam: dict[str, dict[str, np.ndarray]] = {}
    for k, v in arrays.items():
        if k.startswith("adam/"):
            name, slot = k[len("adam/") :].rsplit("/", 1)
            adam.setdefault(name, {})[slot] = v
    return Checkpoint(step, chash, ctext, params, adam)


def restore(ckpt: Checkpoint, model: LoomBackbone, optimizer: Optional[torch.optim.Optimizer] = None) -> None:
    state = model.state_dict()
    if set(state) != set(ckpt.params):
        missing = sorted(set(state) - set(ckpt.params))[:3]
        extra = sorted(set(ckpt.params) - set(state))[:3]
        raise ValueError(f"checkpoint parameters do not match the model (missing {missing}, unexpected {extra})")
    for name, t in state.items():
        if tuple(t.shape) != ckpt.params[name].shape:
            raise ValueError(f"parameter {name} has shape {ckpt.params[name].shape}, model wants {tuple(t.shape)}")
    model.load_state_dict({k: torch.as_tensor(v) for k, v in ckpt.params.items()})
    if optimizer is None:
        return
    named = dict(model.named_parameters())
    for name, slots in ckpt.adam.items():
        p = named[name]
        optimizer.state[p] = {
            "step": torch.tensor(float(slots["step"])),
            "exp_avg": torch.as_tensor(slots["exp_avg"]).to(p.dtype).clone(),
            "exp_avg_sq": torch.as_tensor(slots["exp_avg_sq"]).to(p.dtype).clone(),
        }


def load_model(checkpoint, config: RunConfig) -> LoomBackbone:
    """Model for ``config`` with the checkpoint's weights; the model hashes must agree."""
    ckpt = read_checkpoint(checkpoint)
    if ckpt.config_hash != config.model_hash():
        raise ValueError(
            f"checkpoint was trained with config hash {ckpt.config_hash}, current config hashes to {config.model_hash()}"
        )
    model = build_model(config)
    restore(ckpt, model)
    return model


# ---- training ----


def format_record(step: int, loss: float, tv: float, psnr_value: float) -> str:
    return f"step={step} loss={loss!r} tv={tv!r} psnr={format_psnr(psnr_value) if psnr_value == IDENTICAL else repr(psnr_value)}"


def parse_log(path) -> list[dict]:
    out = []
    for line in Path(path).read_text().splitlines():
        m = LOG_PATTERN.match(line)
        if not m:
            raise ValueError(f"malformed metrics record: {line!r}")
        ps = m.group(4)
        out.append(
            {
                "step": int(m.group(1)),
                "loss": float(m.group(2)),
                "tv": float(m.group(3)),
                "psnr": IDENTICAL if ps == "identical" else float(ps),
            }
        )
    return out


def _batch_psnr(x0: torch.Tensor, clean: torch.Tensor) -> float:
    a = (x0.double() + 1) / 2
    b = (clean.double() + 1) / 2
    mse = float(((a - b) ** 2).mean())
    return IDENTICAL if mse == 0 else 10 * math.log10(1 / mse)


def _trainable(model: LoomBackbone, config: RunConfig, step: int) -> None:
    frozen = config.freeze_backbone or step < config.warmup_steps
    for p in model.backbone_parameters():
        p.requires_grad_(not frozen)


@dataclass
class TrainResult:
    model: LoomBackbone
    step: int
    log_path: Path
    checkpoint_path: Path
    losses: list[float] = field(default_factory=list)


def train(
    config: RunConfig,
    resume: bool = True,
    stop_at: Optional[int] = None,
    scenes: Optional[Sequence[SceneData]] = None,
    progress=None,
) -> TrainResult:
    """Run (or continue) training up to ``config.train_steps``.

    Writes ``metrics.log``, ``config.txt`` and ``checkpoint.npz`` under
    ``config.output``. With ``resume`` an existing checkpoint there is
    picked up and log records after its step are dropped before appending.
    ``stop_at`` ends the run early (a checkpoint is written there).
    """
    if deterministic_requested():
        set_deterministic(True)
    scenes = list(scenes) if scenes is not None else load_scenes(config)
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / CHECKPOINT_NAME
    log_path = out / LOG_NAME

    model = build_model(config)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    schedule = config.schedule()
    start = 0
    if resume and ckpt_path.exists():
        ckpt = read_checkpoint(ckpt_path)
        if ckpt.config_hash != config.model_hash():
            raise ValueError("checkpoint in the output directory belongs to a different model config")
        restore(ckpt, model, optimizer)
        start = ckpt.step
        if log_path.exists():
            keep = [l for l in log_path.read_text().splitlines() if int(LOG_PATTERN.match(l).group(1)) < start]
            log_path.write_text("".join(l + "\n" for l in keep))
    else:
        log_path.write_text("")
    (out / "config.txt").write_text(config.to_text())

    end = config.train_steps if stop_at is None else min(stop_at, config.train_steps)
    losses = []
    with log_path.open("a") as log:
        for step in range(start, end):
            _trainable(model, config, step)
            batch = draw_batch(scenes, config, step)
            loss, parts = total_loss(model, schedule, batch, config.lambda_tv)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if p.grad is not None], config.grad_clip)
            optimizer.step()
            value = float(loss.detach())
            losses.append(value)
            if step % config.log_every == 0 or step == end - 1:
                log.write(format_record(step, value, float(parts["tv"]), _batch_psnr(parts["x0"], batch.clean)) + "\n")
                log.flush()
            if (step + 1) % config.checkpoint_every == 0 or step == end - 1:
                save_checkpoint(ckpt_path, model, optimizer, config, step + 1)
            if progress is not None:
                progress(step, value)
    for p in model.parameters():
        p.requires_grad_(True)
    return TrainResult(model, end, log_path, ckpt_path, losses)


# ---- evaluation ----


@dataclass
class EvalRow:
    scene_id: str
    view: int
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        vals = [r.psnr for r in self.rows]
        if all(v == IDENTICAL for v in vals):
            return IDENTICAL
        return float(np.mean([v for v in vals if v != IDENTICAL]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows]))

    def table(self) -> str:
        lines = [f"{'scene':<14}{'view':>6}{'psnr_db':>14}{'ssim':>10}"]
        for r in self.rows:
            lines.append(f"{r.scene_id:<14}{r.view:>6}{format_psnr(r.psnr):>14}{r.ssim:>10.4f}")
        lines.append(f"{'mean':<20}{format_psnr(self.mean_psnr):>14}{self.mean_ssim:>10.4f}")
        return "\n".join(lines) + "\n"

    def key_values(self) -> str:
        out = [f"{k}={v}" for k, v in self.metadata.items()]
        out.append(f"rows={len(self.rows)}")
        out.append(f"mean_psnr={format_psnr(self.mean_psnr)}")
        out.append(f"mean_ssim={self.mean_ssim!r}")
        for r in self.rows:
            out.append(f"psnr.{r.scene_id}.view_{r.view}={format_psnr(r.psnr)}")
            out.append(f"ssim.{r.scene_id}.view_{r.view}={r.ssim!r}")
        return "\n".join(out) + "\n"

    def write(self, directory) -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        table, kv = d / "eval_table.txt", d / "eval_report.txt"
        table.write_text(self.table())
        kv.write_text(self.key_values())
        return table, kv


def score_views(scene_ids: Sequence[str], generated: Sequence[np.ndarray], truth: Sequence[np.ndarray]) -> list[EvalRow]:
    """Rows for views 1..N-1 of each scene; arrays are (N, H, W, 3) in [0, 1]."""
    rows = []
    for sid, gen, gt in zip(scene_ids, generated, truth):
        for k in range(1, len(gt)):
            rows.append(EvalRow(sid, k, psnr(gen[k], gt[k]), ssim(gen[k], gt[k])))
    return rows


def generate_views(model: LoomBackbone, config: RunConfig, scenes: Sequence[SceneData], seed: Optional[int] = None):
    """Sample views 0..N-1 of every scene conditioned on view 0; returns a list of (N, H, W, 3)."""
    schedule = config.schedule()
    sampler = SamplerConfig(config.sampler, config.sampler_steps)
    n = config.num_views
    seed = config.seed if seed is None else seed
    dtype = next(model.parameters()).dtype
    outputs = []
    for start in range(0, len(scenes), config.batch_size):
        chunk = scenes[start : start + config.batch_size]
        ref = image_to_latent(np.stack([s.images[0] for s in chunk])).permute(0, 3, 1, 2).to(dtype)
        poses = ViewPoses.from_cameras([s.poses[:n] for s in chunk]).to(dtype)
        z = sample_latents(model, schedule, ref, poses, sampler, seed=seed * 1_000_003 + start)
        outputs.extend(latent_to_image(z.permute(0, 1, 3, 4, 2)))
    return outputs


def evaluate(checkpoint, config: RunConfig, scenes: Optional[Sequence[SceneData]] = None, out_dir=None) -> EvalReport:
    """Condition on view 0, sample the rest and score them against ground truth."""
    if deterministic_requested():
        set_deterministic(True)
    model = load_model(checkpoint, config)
    scenes = list(scenes) if scenes is not None else load_scenes(config)
    generated = generate_views(model, config, scenes)
    rows = score_views([s.scene_id for s in scenes], generated, [s.images[: config.num_views] for s in scenes])
    report = EvalReport(
        rows,
        {
            "checkpoint": str(checkpoint),
            "config_hash": config.model_hash(),
            "sampler": config.sampler,
            "sampler_steps": str(config.sampler_steps),
            "scenes": str(len(scenes)),
            "num_views": str(config.num_views),
        },
    )
    if out_dir is not None:
        report.write(out_dir)
    return report
