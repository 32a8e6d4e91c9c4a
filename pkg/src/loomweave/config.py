"""Run configuration stored as plain ``key=value`` text.

Blank lines and lines starting with ``#`` are ignored. Model-size keys set to
``default`` take the value of the chosen scale preset.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .backbone import ModelConfig
from .diffusion import DEFAULT_LAMBDA_TV, NoiseSchedule

# keys that change the trained function; a checkpoint records their hash
MODEL_KEYS = (
    "scale",
    "num_views",
    "m_samples",
    "cube_side",
    "splat_res",
    "triplane_res",
    "triplane_channels",
    "fusion_mode",
    "use_pe",
    "render_sites",
    "site_iterations",
    "num_steps",
    "beta_start",
    "beta_end",
)


@dataclass(frozen=True)
class RunConfig:
    scale: str = "desk"
    num_views: int = 4
    m_samples: Optional[int] = None
    cube_side: float = 1.5
    splat_res: Optional[int] = None
    triplane_res: Optional[int] = None
    triplane_channels: Optional[int] = None
    fusion_mode: str = "attention"
    use_pe: bool = True
    render_sites: str = "final"
    site_iterations: Optional[tuple[int, ...]] = None
    num_steps: Optional[int] = None
    beta_start: Optional[float] = None
    beta_end: Optional[float] = None
    lambda_tv: float = DEFAULT_LAMBDA_TV
    lr: float = 3e-4
    batch_size: int = 2
    seed: int = 0
    dataset: str = "dataset"
    output: str = "runs/default"
    train_steps: int = 3000
    scenes: int = 0  # use the first k scenes of the dataset; 0 = all
    log_every: int = 1
    checkpoint_every: int = 500
    grad_clip: float = 1.0
    freeze_backbone: bool = False
    warmup_steps: int = 0
    sampler: str = "ddim"
    sampler_steps: int = 20

    def __post_init__(self):
        errors = []
        if self.scale not in ("desk", "paper"):
            errors.append("scale must be 'desk' or 'paper'")
        if self.num_views < 1:
            errors.append("num_views must be >= 1")
        for key in ("m_samples", "splat_res", "triplane_res", "triplane_channels", "num_steps"):
            v = getattr(self, key)
            if v is not None and v < 1:
                errors.append(f"{key} must be >= 1")
        if self.cube_side <= 0:
            errors.append("cube_side must be positive")
        if self.fusion_mode not in ("attention", "mean"):
            errors.append("fusion_mode must be 'attention' or 'mean'")
        if self.render_sites not in ("final", "all"):
            errors.append("render_sites must be 'final' or 'all'")
        if self.site_iterations is not None:
            object.__setattr__(self, "site_iterations", tuple(int(i) for i in self.site_iterations))
            if not self.site_iterations or min(self.site_iterations) < 1:
                errors.append("site_iterations must be a nonempty list of positive counts")
        for key in ("beta_start", "beta_end"):
            v = getattr(self, key)
            if v is not None and not 0 < v < 1:
                errors.append(f"{key} must lie in (0, 1)")
        if self.lambda_tv < 0:
            errors.append("lambda_tv must be non-negative")
        if self.lr <= 0:
            errors.append("lr must be positive")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.train_steps < 0 or self.scenes < 0 or self.warmup_steps < 0:
            errors.append("train_steps, scenes and warmup_steps must be non-negative")
        if self.log_every < 1 or self.checkpoint_every < 1:
            errors.append("log_every and checkpoint_every must be >= 1")
        if self.grad_clip < 0:
            errors.append("grad_clip must be non-negative (0 disables clipping)")
        if self.sampler not in ("ddim", "ancestral"):
            errors.append("sampler must be 'ddim' or 'ancestral'")
        if self.sampler_steps < 1:
            errors.append("sampler_steps must be >= 1")
        if errors:
            raise ValueError("invalid run config: " + "; ".join(errors))

    # ---- text form ----

    def to_text(self) -> str:
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        return cls.from_strings(values)

    @classmethod
    def from_strings(cls, values: dict[str, str], base: Optional["RunConfig"] = None) -> "RunConfig":
        """Parse string values by field type; unknown keys are rejected."""
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        parsed = {}
        for key, value in values.items():
            try:
                parsed[key] = _parse(key, str(value))
            except ValueError as exc:
                raise ValueError(f"bad value for {key}: {value!r} ({exc})") from None
        return replace(base, **parsed) if base is not None else cls(**parsed)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    # ---- derived objects ----

    def model_hash(self) -> str:
        """Digest of the keys that determine the model and noise schedule."""
        text = "".join(f"{k}={_format(getattr(self, k))}\n" for k in MODEL_KEYS)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def to_model_config(self) -> ModelConfig:
        preset = ModelConfig.desk if self.scale == "desk" else ModelConfig.paper
        overrides = dict(
            cube_side=self.cube_side,
            fusion_mode=self.fusion_mode,
            use_pe=self.use_pe,
            render_sites=self.render_sites,
        )
        for key in ("m_samples", "splat_res", "triplane_res", "triplane_channels", "site_iterations", "num_steps"):
            if getattr(self, key) is not None:
                overrides[key] = getattr(self, key)
        return preset(**overrides)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.to_model_config().num_steps, self.beta_start, self.beta_end)


_INT = {"num_views", "batch_size", "seed", "train_steps", "scenes", "log_every", "checkpoint_every",
        "warmup_steps", "sampler_steps"}
_OPT_INT = {"m_samples", "splat_res", "triplane_res", "triplane_channels", "num_steps"}
_FLOAT = {"cube_side", "lambda_tv", "lr", "grad_clip"}
_OPT_FLOAT = {"beta_start", "beta_end"}
_BOOL = {"use_pe", "freeze_backbone"}


def _parse(key: str, value: str):
    if key in _INT:
        return int(value)
    if key in _OPT_INT:
        return None if value == "default" else int(value)
    if key in _FLOAT:
        return float(value)
    if key in _OPT_FLOAT:
        return None if value == "default" else float(value)
    if key in _BOOL:
        low = value.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if key == "site_iterations":
        return None if value == "default" else tuple(int(v) for v in value.split(","))
    return value


def _format(value) -> str:
    if value is None:
        return "default"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)
