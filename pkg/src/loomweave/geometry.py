"""Camera and ray mathematics.

Conventions used throughout the package:

* Extrinsics are world->camera: ``x_cam = R @ x_world + t``. The camera
  center in world coordinates is ``-R.T @ t``.
* Cameras are right-handed and look down their local ``-z`` axis; local
  ``+y`` points up, so image rows grow in the ``-y`` direction.
* Pixel centers sit at integer coordinates; the principal point is stored as
  ``(cx, cy)`` = (column, row).
* The world is z-up. Elevation is measured from the XY plane and azimuth
  counter-clockwise from ``+x``.

The scalar API (``make_rays``, ``intersect_cube`` ...) works on small
dataclasses and is meant for tests and inspection. The ``*_batch`` and
tensor helpers are what the model uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

DEFAULT_FOV_DEG = 49.1
DEFAULT_CUBE_SIDE = 1.5


def _as_vec3(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {np.shape(x)}")
    return arr


@dataclass(frozen=True)
class CameraPose:
    """World->camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rot.shape}")
        if not np.all(np.isfinite(rot)):
            raise ValueError("rotation has non-finite entries")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-6:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", _as_vec3(self.translation, "translation"))

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def from_center(cls, rotation, center) -> "CameraPose":
        rot = np.asarray(rotation, dtype=np.float64)
        return cls(rot, -rot @ _as_vec3(center, "center"))

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> "CameraPose":
        eye = _as_vec3(eye, "eye")
        forward = _as_vec3(target, "target") - eye
        forward /= np.linalg.norm(forward)
        up = _as_vec3(up, "up")
        if np.linalg.norm(np.cross(forward, up)) < 1e-9:
            # looking straight along the up axis
            up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        cam_up = np.cross(right, forward)
        rot = np.stack([right, cam_up, -forward])
        return cls(rot, -rot @ eye)

    @classmethod
    def from_spherical(cls, elevation_deg: float, azimuth_deg: float, radius: float) -> "CameraPose":
        """Camera on a sphere around the origin, looking at the origin."""
        return cls.look_at(spherical_to_cartesian(elevation_deg, azimuth_deg, radius))

    def spherical(self) -> tuple[float, float, float]:
        """(elevation_deg, azimuth_deg, radius) of the camera center."""
        return cartesian_to_spherical(self.center)

    def rotated_about_z(self, angle_deg: float) -> "CameraPose":
        """The same camera after rotating the world by ``angle_deg`` about +z."""
        a = math.radians(angle_deg)
        rz = np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]])
        # x_cam = R x = R Rz^T (Rz x)
        return CameraPose(self.rotation @ rz.T, self.translation.copy())


def spherical_to_cartesian(elevation_deg: float, azimuth_deg: float, radius: float) -> np.ndarray:
    e, a = math.radians(elevation_deg), math.radians(azimuth_deg)
    return radius * np.array([math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)])


def cartesian_to_spherical(p) -> tuple[float, float, float]:
    x, y, z = _as_vec3(p, "point")
    radius = float(math.sqrt(x * x + y * y + z * z))
    elevation = math.degrees(math.asin(max(-1.0, min(1.0, z / radius))))
    azimuth = math.degrees(math.atan2(y, x)) % 360.0
    return elevation, azimuth, radius


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels of the grid they describe."""

    focal: float
    principal_point: tuple[float, float]
    resolution: tuple[int, int]

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError("focal must be positive")
        h, w = (int(v) for v in self.resolution)
        if h < 1 or w < 1:
            raise ValueError("resolution components must be >= 1")
        object.__setattr__(self, "resolution", (h, w))
        object.__setattr__(self, "principal_point", tuple(float(v) for v in self.principal_point))

    @classmethod
    def from_fov(cls, resolution: tuple[int, int], fov_deg: float = DEFAULT_FOV_DEG) -> "Intrinsics":
        """Vertical field of view, principal point at the grid center."""
        h, w = resolution
        focal = 0.5 * h / math.tan(math.radians(fov_deg) / 2.0)
        return cls(focal, ((w - 1) / 2.0, (h - 1) / 2.0), (h, w))

    def rescaled(self, resolution: tuple[int, int]) -> "Intrinsics":
        """Same camera sampled on a grid of a different size (pixel edges preserved)."""
        h, w = resolution
        sy, sx = h / self.resolution[0], w / self.resolution[1]
        cx, cy = self.principal_point
        return Intrinsics(self.focal * sy, ((cx + 0.5) * sx - 0.5, (cy + 0.5) * sy - 0.5), (h, w))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[int, int] = (0, 0)

    def __post_init__(self):
        d = _as_vec3(self.direction, "direction")
        n = np.linalg.norm(d)
        if n == 0:
            raise ValueError("ray direction must be nonzero")
        object.__setattr__(self, "origin", _as_vec3(self.origin, "origin"))
        object.__setattr__(self, "direction", d / n)


@dataclass(frozen=True)
class CubeHit:
    t_near: float
    t_far: float
    hit: bool


@dataclass(frozen=True)
class RaySample:
    position: np.ndarray
    depth: float
    feature: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass(frozen=True)
class HarmonicConfig:
    num_frequencies: int = 4
    include_input: bool = False

    def __post_init__(self):
        if self.num_frequencies < 1:
            raise ValueError("num_frequencies must be >= 1")

    def out_dim(self, k: int) -> int:
        return k * (2 * self.num_frequencies + int(self.include_input))


def embed_dim(cfg: Optional[HarmonicConfig], k: int) -> int:
    """Width of the harmonic embedding of a k-vector; ``cfg=None`` disables it."""
    return 0 if cfg is None else cfg.out_dim(k)


# ---------------------------------------------------------------------------
# tensor helpers


def pixel_directions_camera(intr: Intrinsics, dtype=torch.float64, device=None) -> torch.Tensor:
    """Unnormalized camera-space directions for every pixel, row-major, (H*W, 3)."""
    h, w = intr.resolution
    rows = torch.arange(h, dtype=dtype, device=device)
    cols = torch.arange(w, dtype=dtype, device=device)
    rr, cc = torch.meshgrid(rows, cols, indexing="ij")
    cx, cy = intr.principal_point
    x = (cc - cx) / intr.focal
    y = -(rr - cy) / intr.focal
    z = -torch.ones_like(x)
    return torch.stack([x, y, z], dim=-1).reshape(-1, 3)


def camera_rays(rotation: torch.Tensor, translation: torch.Tensor, intr: Intrinsics):
    """Rays for batched world->camera poses.

    rotation (..., 3, 3), translation (..., 3) -> origins, directions of
    shape (..., H*W, 3). Directions are unit length.
    """
    dirs_cam = pixel_directions_camera(intr, rotation.dtype, rotation.device)
    # world direction = R^T d_cam  ->  row form d_cam @ R
    dirs = torch.einsum("pk,...kj->...pj", dirs_cam, rotation)
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    center = -torch.einsum("...kj,...k->...j", rotation, translation)
    origins = center.unsqueeze(-2).expand_as(dirs)
    return origins, dirs


def intersect_cube_batch(origins: torch.Tensor, directions: torch.Tensor, side: float):
    """Slab-method ray/cube intersection for a cube centered at the origin.

    Returns (t_near, t_far, hit); t_near is clamped to 0 for origins inside
    the cube, and both are 0 where the ray misses.
    """
    half = side / 2.0
    zero_dir = directions == 0
    safe = torch.where(zero_dir, torch.ones_like(directions), directions)
    t1 = (-half - origins) / safe
    t2 = (half - origins) / safe
    lo = torch.minimum(t1, t2)
    hi = torch.maximum(t1, t2)
    inside_slab = origins.abs() <= half
    inf = torch.full_like(lo, math.inf)
    lo = torch.where(zero_dir, torch.where(inside_slab, -inf, inf), lo)
    hi = torch.where(zero_dir, torch.where(inside_slab, inf, -inf), hi)
    t_min = lo.max(dim=-1).values
    t_max = hi.min(dim=-1).values
    t_near = t_min.clamp(min=0.0)
    hit = t_max > t_near
    zeros = torch.zeros_like(t_near)
    return torch.where(hit, t_near, zeros), torch.where(hit, t_max, zeros), hit


def sample_depths(t_near: torch.Tensor, t_far: torch.Tensor, m: int, jitter: Optional[torch.Generator] = None):
    """Midpoints of m equal sub-intervals of [t_near, t_far], shape (..., m).

    With a generator, each depth is instead drawn uniformly inside its
    sub-interval.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    k = torch.arange(m, dtype=t_near.dtype, device=t_near.device)
    if jitter is None:
        u = (k + 0.5) / m
        u = u.expand(*t_near.shape, m)
    else:
        r = torch.rand(*t_near.shape, m, generator=jitter, dtype=t_near.dtype)
        u = (k + r) / m
    return t_near.unsqueeze(-1) + u * (t_far - t_near).unsqueeze(-1)


def plucker(origins: torch.Tensor, directions: torch.Tensor) -> torch.Tensor:
    """(d, o x d) for unit directions, shape (..., 6)."""
    return torch.cat([directions, torch.cross(origins, directions, dim=-1)], dim=-1)


def harmonic(x: torch.Tensor, cfg: HarmonicConfig) -> torch.Tensor:
    """[x?, sin(2^j x)..., cos(2^j x)...] along the last axis."""
    freqs = 2.0 ** torch.arange(cfg.num_frequencies, dtype=x.dtype, device=x.device)
    scaled = (x.unsqueeze(-1) * freqs).flatten(-2)
    parts = [torch.sin(scaled), torch.cos(scaled)]
    if cfg.include_input:
        parts.insert(0, x)
    return torch.cat(parts, dim=-1)


def point_features(
    pixel_features: torch.Tensor,
    plucker_coords: torch.Tensor,
    depths: torch.Tensor,
    plucker_cfg: Optional[HarmonicConfig],
    depth_cfg: Optional[HarmonicConfig],
) -> torch.Tensor:
    """Enriched per-sample features f_q.

    pixel_features (..., P, C), plucker_coords (..., P, 6), depths (..., P, M)
    -> (..., P, M, C + E_plucker + E_depth). A ``None`` config drops that
    embedding entirely.
    """
    m = depths.shape[-1]
    per_ray = [pixel_features]
    if plucker_cfg is not None:
        per_ray.append(harmonic(plucker_coords, plucker_cfg))
    shared = torch.cat(per_ray, dim=-1).unsqueeze(-2)
    shared = shared.expand(*shared.shape[:-2], m, shared.shape[-1])
    if depth_cfg is None:
        return shared
    return torch.cat([shared, harmonic(depths.unsqueeze(-1), depth_cfg)], dim=-1)


# ---------------------------------------------------------------------------
# scalar API


def make_rays(pose: CameraPose, intr: Intrinsics) -> list[Ray]:
    """One ray per pixel of the grid, row-major."""
    rot = torch.as_tensor(pose.rotation)
    trans = torch.as_tensor(pose.translation)
    origins, dirs = camera_rays(rot, trans, intr)
    _, w = intr.resolution
    return [
        Ray(o, d, (i // w, i % w)) for i, (o, d) in enumerate(zip(origins.numpy(), dirs.numpy()))
    ]


def intersect_cube(ray: Ray, side: float) -> CubeHit:
    if not side > 0:
        raise ValueError("cube side must be positive")
    t_near, t_far, hit = intersect_cube_batch(
        torch.as_tensor(ray.origin)[None], torch.as_tensor(ray.direction)[None], side
    )
    return CubeHit(float(t_near[0]), float(t_far[0]), bool(hit[0]))


def sample_along_ray(ray: Ray, hit: CubeHit, m: int) -> list[RaySample]:
    if m < 1:
        raise ValueError("m must be >= 1")
    if not hit.hit:
        return []
    depths = sample_depths(torch.tensor(hit.t_near, dtype=torch.float64), torch.tensor(hit.t_far, dtype=torch.float64), m).numpy()
    return [RaySample(ray.origin + t * ray.direction, float(t)) for t in depths]


def plucker_encode(ray: Ray) -> np.ndarray:
    return plucker(torch.as_tensor(ray.origin), torch.as_tensor(ray.direction)).numpy()


def harmonic_embed(x, cfg: HarmonicConfig) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if not np.all(np.isfinite(arr)):
        raise ValueError("harmonic_embed input must be finite")
    return harmonic(torch.as_tensor(arr), cfg).numpy()


def build_point_features(
    samples: Sequence[RaySample],
    pixel_feature,
    plucker_coords,
    cfg: Optional[HarmonicConfig] = HarmonicConfig(),
    depth_cfg: Optional[HarmonicConfig] = None,
) -> list[RaySample]:
    """Attach f_q = [pixel feature, H(plucker), H(depth)] to every sample.

    ``depth_cfg`` defaults to ``cfg``.
    """
    if not samples:
        raise ValueError("samples must be nonempty")
    pix = np.asarray(pixel_feature, dtype=np.float64).reshape(-1)
    pl = np.asarray(plucker_coords, dtype=np.float64).reshape(-1)
    if pl.shape != (6,):
        raise ValueError(f"plucker coordinates must have 6 entries, got {pl.shape[0]}")
    depth_cfg = cfg if depth_cfg is None else depth_cfg
    depths = torch.tensor([[s.depth for s in samples]], dtype=torch.float64)
    feats = point_features(torch.as_tensor(pix)[None], torch.as_tensor(pl)[None], depths, cfg, depth_cfg)[0]
    return [RaySample(s.position, s.depth, f) for s, f in zip(samples, feats.numpy())]
