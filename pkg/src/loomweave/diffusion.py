"""Noise schedule, training losses and the multi-view sampler.

Timesteps are 1-indexed: ``alpha_bar(t) = prod_{s<=t} (1 - beta_s)`` and
``alpha_bar(0) = 1``. Latents are images mapped to [-1, 1] (identity codec).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .backbone import LoomBackbone, ViewPoses
from .geometry import CameraPose

DEFAULT_LAMBDA_TV = 0.001


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64).reshape(-1)
        if betas.size < 1 or np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", betas)

    @classmethod
    def linear(cls, num_steps: int = 100, beta_start: Optional[float] = None, beta_end: Optional[float] = None):
        """Linear betas from ``beta_start`` to ``beta_end`` (default 1e-4 -> 2e-2)."""
        beta_start = 1e-4 if beta_start is None else beta_start
        beta_end = 2e-2 if beta_end is None else beta_end
        return cls(np.linspace(beta_start, beta_end, num_steps))

    @property
    def num_steps(self) -> int:
        return self.betas.size

    @property
    def alpha_bars(self) -> np.ndarray:
        """Length T + 1, index t."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    def alpha_bar(self, t) -> torch.Tensor:
        return torch.as_tensor(self.alpha_bars)[torch.as_tensor(t).long()]

    def check_timesteps(self, t):
        t = torch.as_tensor(t)
        if t.numel() and (int(t.min()) < 1 or int(t.max()) > self.num_steps):
            raise ValueError(f"timestep outside [1, {self.num_steps}]")


def _bcast(x: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return x.reshape(-1, *([1] * (like.dim() - 1))) if x.dim() else x


def q_sample(schedule: NoiseSchedule, clean: torch.Tensor, timestep, noise: torch.Tensor) -> torch.Tensor:
    """sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; ``timestep`` is a scalar or one per leading item."""
    schedule.check_timesteps(timestep)
    ab = _bcast(schedule.alpha_bar(timestep).to(clean.dtype), clean)
    return ab.sqrt() * clean + (1 - ab).sqrt() * noise


def image_to_latent(img):
    return torch.as_tensor(np.asarray(img, dtype=np.float32)) * 2 - 1


def latent_to_image(z: torch.Tensor) -> np.ndarray:
    return ((z.detach().double().cpu().numpy() + 1) / 2).clip(0.0, 1.0)


@dataclass
class DenoiserState:
    """One scene: N noisy latents (N, C, H, W) at a shared timestep."""

    latents: torch.Tensor
    timestep: int
    reference_latent: torch.Tensor
    relative_poses: Sequence[CameraPose]
    reference_pose: Optional[CameraPose] = None

    def __post_init__(self):
        if self.latents.dim() != 4 or self.latents.shape[0] < 1:
            raise ValueError("latents must be (N, C, H, W) with N >= 1")
        if tuple(self.latents.shape[1:]) != tuple(self.reference_latent.shape):
            raise ValueError("latents and reference latent differ in shape")
        if len(self.relative_poses) != self.latents.shape[0]:
            raise ValueError("need one pose per view")

    def view_poses(self) -> ViewPoses:
        refs = None if self.reference_pose is None else [self.reference_pose]
        return ViewPoses.from_cameras([list(self.relative_poses)], refs)


def predict_noise(model: LoomBackbone, state: DenoiserState) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    t = torch.tensor([state.timestep])
    out = model(
        state.latents[None].to(dtype), t, state.reference_latent[None].to(dtype), state.view_poses().to(dtype)
    )
    return out[0]


@dataclass
class Batch:
    """Training batch of B scenes with N views each."""

    clean: torch.Tensor  # (B, N, C, H, W)
    reference: torch.Tensor  # (B, C, H, W)
    poses: ViewPoses
    timesteps: torch.Tensor  # (B,)
    noise: torch.Tensor  # (B, N, C, H, W)


def diffusion_loss(model: LoomBackbone, schedule: NoiseSchedule, batch: Batch, return_prediction: bool = False):
    """Mean squared error between the true and predicted noise, averaged over views, pixels and channels."""
    if batch.noise.shape != batch.clean.shape:
        raise ValueError("noise must match the latent shape")
    noisy = q_sample(schedule, batch.clean, batch.timesteps, batch.noise)
    pred = model(noisy, batch.timesteps, batch.reference, batch.poses)
    loss = ((batch.noise - pred) ** 2).mean()
    return (loss, pred, noisy) if return_prediction else loss


def tv_loss(planes) -> torch.Tensor:
    """Sum over planes of mean squared horizontal plus mean squared vertical forward differences.

    Accepts a mapping or sequence of (H, W, C) arrays; a direction with no
    neighbour pairs contributes 0.
    """
    planes = list(planes.values()) if isinstance(planes, dict) else list(planes)
    total = torch.zeros((), dtype=torch.as_tensor(planes[0]).dtype)
    for p in planes:
        p = torch.as_tensor(p)
        if p.shape[0] > 1:
            total = total + ((p[1:] - p[:-1]) ** 2).mean()
        if p.shape[1] > 1:
            total = total + ((p[:, 1:] - p[:, :-1]) ** 2).mean()
    return total


def model_tv(model: LoomBackbone) -> torch.Tensor:
    return sum(tv_loss(planes) for planes in model.fusion_planes())


def total_loss(model: LoomBackbone, schedule: NoiseSchedule, batch: Batch, lambda_tv: float = DEFAULT_LAMBDA_TV):
    """Diffusion loss plus ``lambda_tv`` times TV of every learnable fusion plane.

    Returns (total, parts) where parts holds detached ``diffusion``, ``tv``
    and the model's x0 estimate for logging.
    """
    if lambda_tv < 0:
        raise ValueError("lambda_tv must be non-negative")
    diff, pred, noisy = diffusion_loss(model, schedule, batch, return_prediction=True)
    tv = model_tv(model)
    total = diff + lambda_tv * tv if lambda_tv else diff
    ab = _bcast(schedule.alpha_bar(batch.timesteps).to(noisy.dtype), noisy)
    x0 = ((noisy - (1 - ab).sqrt() * pred) / ab.sqrt()).clamp(-1, 1)
    return total, {"diffusion": diff.detach(), "tv": tv.detach(), "x0": x0.detach()}


@dataclass(frozen=True)
class SamplerConfig:
    name: str = "ddim"
    steps: int = 20
    clip_x0: bool = True

    def __post_init__(self):
        if self.name not in ("ddim", "ancestral"):
            raise ValueError(f"unsupported sampler {self.name!r}; use 'ddim' or 'ancestral'")
        if self.steps < 1:
            raise ValueError("sampler steps must be >= 1")


def _x0_and_eps(x, eps, ab, clip):
    x0 = (x - (1 - ab).sqrt() * eps) / ab.sqrt()
    if clip:
        x0 = x0.clamp(-1, 1)
        eps = (x - ab.sqrt() * x0) / (1 - ab).sqrt()
    return x0, eps


@torch.no_grad()
def sample_latents(
    model: LoomBackbone,
    schedule: NoiseSchedule,
    reference: torch.Tensor,
    poses: ViewPoses,
    config: SamplerConfig = SamplerConfig(),
    seed: int = 0,
    init: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Reverse process for B scenes at once; reference (B, C, H, W) -> (B, N, C, H, W).

    ``init`` replaces the pure-noise starting latents (B, N, C, H, W), e.g.
    with a q_sample-corrupted training example.
    """
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    b, n = poses.shape
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn(b, n, *reference.shape[1:], generator=gen, dtype=torch.float64).to(dtype)
    if init is not None:
        if init.shape != x.shape:
            raise ValueError(f"init latents {tuple(init.shape)} do not match {tuple(x.shape)}")
        x = init.to(dtype)
    reference = reference.to(dtype)
    poses = poses.to(dtype)
    abars = torch.as_tensor(schedule.alpha_bars, dtype=dtype)
    T = schedule.num_steps
    try:
        if config.name == "ddim":
            steps = min(config.steps, T)
            seq = sorted({int(round((i + 1) * T / steps)) for i in range(steps)}, reverse=True)
            for i, t in enumerate(seq):
                t_prev = seq[i + 1] if i + 1 < len(seq) else 0
                eps = model(x, torch.full((b,), t), reference, poses)
                x0, eps = _x0_and_eps(x, eps, abars[t], config.clip_x0)
                x = abars[t_prev].sqrt() * x0 + (1 - abars[t_prev]).sqrt() * eps
        else:
            betas = torch.as_tensor(schedule.betas, dtype=dtype)
            for t in range(T, 0, -1):
                eps = model(x, torch.full((b,), t), reference, poses)
                x0, _ = _x0_and_eps(x, eps, abars[t], config.clip_x0)
                ab, ab_prev, beta = abars[t], abars[t - 1], betas[t - 1]
                mean = (ab_prev.sqrt() * beta / (1 - ab)) * x0 + ((1 - beta).sqrt() * (1 - ab_prev) / (1 - ab)) * x
                if t > 1:
                    var = beta * (1 - ab_prev) / (1 - ab)
                    z = torch.randn(x.shape, generator=gen, dtype=torch.float64).to(dtype)
                    x = mean + var.sqrt() * z
                else:
                    x = mean
    finally:
        model.train(was_training)
    return x


def sample_multiview(
    model: LoomBackbone,
    schedule: NoiseSchedule,
    reference_image,
    poses: Sequence[CameraPose],
    sampler_config: SamplerConfig = SamplerConfig(),
    rng_seed: int = 0,
    reference_pose: Optional[CameraPose] = None,
) -> np.ndarray:
    """Generate one image per pose from a single (H, W, 3) reference image in [0, 1].

    ``reference_pose`` defaults to ``poses[0]``. Returns (N, H, W, 3) in [0, 1].
    """
    if not poses:
        raise ValueError("need at least one target pose")
    ref = image_to_latent(reference_image).permute(2, 0, 1)[None]
    refs = None if reference_pose is None else [reference_pose]
    vp = ViewPoses.from_cameras([list(poses)], refs)
    z = sample_latents(model, schedule, ref, vp, sampler_config, rng_seed)
    return latent_to_image(z[0].permute(0, 2, 3, 1))
