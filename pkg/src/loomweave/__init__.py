"""Multi-view diffusion where per-view UNets communicate through a shared triplane."""

from .backbone import LoomBackbone, ModelConfig, ViewPoses
from .config import RunConfig
from .diffusion import NoiseSchedule, SamplerConfig, sample_multiview
from .geometry import CameraPose, Intrinsics

__all__ = [
    "CameraPose",
    "Intrinsics",
    "LoomBackbone",
    "ModelConfig",
    "NoiseSchedule",
    "RunConfig",
    "SamplerConfig",
    "ViewPoses",
    "sample_multiview",
]
__version__ = "0.1.0"
