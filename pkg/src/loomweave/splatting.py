"""Per-view inverse bilinear splatting onto three axis-aligned planes."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np
import torch

from ._sparse import SparseOperator
from .geometry import (
    CameraPose,
    HarmonicConfig,
    Intrinsics,
    RaySample,
    camera_rays,
    harmonic,
    intersect_cube_batch,
    plucker,
    sample_depths,
)

SPLAT_EPS = 1e-8


class Orientation(str, Enum):
    XY = "XY"
    YZ = "YZ"
    XZ = "XZ"

    @property
    def axes(self) -> tuple[int, int]:
        """World axes kept by the plane; the first indexes grid rows."""
        return _AXES[self]

    @property
    def tag(self) -> int:
        return ORIENTATIONS.index(self)


_AXES = {Orientation.XY: (0, 1), Orientation.YZ: (1, 2), Orientation.XZ: (0, 2)}
ORIENTATIONS = (Orientation.XY, Orientation.YZ, Orientation.XZ)


@dataclass
class FeaturePlane:
    orientation: Orientation
    grid: torch.Tensor  # (H, W, C)
    weight_grid: torch.Tensor  # (H, W)

    def __post_init__(self):
        self.orientation = Orientation(self.orientation)
        if self.grid.shape[:2] != self.weight_grid.shape:
            raise ValueError("grid and weight_grid must share spatial shape")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.weight_grid.shape)

    @property
    def channels(self) -> int:
        return self.grid.shape[-1]


@dataclass
class PerViewTriplane:
    planes: dict[Orientation, FeaturePlane]
    view_index: int = 0

    def __post_init__(self):
        if set(self.planes) != set(ORIENTATIONS):
            raise ValueError("a per-view triplane needs exactly one plane per orientation")

    def __getitem__(self, key) -> FeaturePlane:
        return self.planes[Orientation(key)]


def project(positions: torch.Tensor, orientation, side: float, resolution: tuple[int, int]) -> torch.Tensor:
    """Continuous pixel coordinates (..., 2) of 3D positions on a plane.

    [-side/2, side/2] maps affinely onto [-0.5, size - 0.5]; pixel centers
    are integers.
    """
    a, b = Orientation(orientation).axes
    h, w = resolution
    u = (positions[..., a] / side + 0.5) * h - 0.5
    v = (positions[..., b] / side + 0.5) * w - 0.5
    return torch.stack([u, v], dim=-1)


def bilinear_taps(uv: torch.Tensor, resolution: tuple[int, int]):
    """Four-neighbour bilinear footprint of continuous coordinates.

    Returns (flat_index, weight), each (..., 4). Taps that fall outside the
    grid get weight 0 and index 0; the remaining weights are not
    renormalized.
    """
    h, w = resolution
    u, v = uv[..., 0], uv[..., 1]
    u0 = torch.floor(u)
    v0 = torch.floor(v)
    fu = u - u0
    fv = v - v0
    u0 = u0.long()
    v0 = v0.long()
    rows = torch.stack([u0, u0 + 1, u0, u0 + 1], dim=-1)
    cols = torch.stack([v0, v0, v0 + 1, v0 + 1], dim=-1)
    weights = torch.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], dim=-1)
    valid = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    index = torch.where(valid, rows * w + cols, torch.zeros_like(rows))
    return index, weights * valid


def splat_features(
    features: torch.Tensor,
    positions: torch.Tensor,
    orientation,
    side: float,
    resolution: tuple[int, int],
    valid: Optional[torch.Tensor] = None,
    eps: float = SPLAT_EPS,
):
    """Batched inverse bilinear splatting.

    features (B, P, C) and positions (B, P, 3) -> grid (B, H, W, C) holding
    sum(w f) / (sum(w) + eps) per pixel, and the weight mass (B, H, W).
    ``valid`` (B, P) masks out points that should not contribute.
    """
    b, p, c = features.shape
    h, w = resolution
    index, weights = bilinear_taps(project(positions, orientation, side, resolution), resolution)
    if valid is not None:
        weights = weights * valid.unsqueeze(-1).to(weights.dtype)
    weights = weights.to(features.dtype)
    offset = (torch.arange(b, device=features.device) * (h * w)).view(b, 1, 1)
    index = (index + offset).reshape(b * p, 4)
    weights = weights.reshape(b * p, 4)
    flat = features.reshape(b * p, c)
    acc = features.new_zeros(b * h * w, c)
    mass = features.new_zeros(b * h * w)
    for k in range(4):
        acc = acc.index_add(0, index[:, k], flat * weights[:, k : k + 1])
        mass = mass.index_add(0, index[:, k], weights[:, k])
    grid = acc / (mass.unsqueeze(-1) + eps)
    return grid.view(b, h, w, c), mass.view(b, h, w)


def _check_inside(positions: torch.Tensor, side: float):
    if positions.numel() and positions.abs().max() > side / 2 + 1e-9:
        raise ValueError("position lies outside the cube")


def project_point(position, orientation, side: float, resolution: tuple[int, int]) -> np.ndarray:
    pos = torch.as_tensor(np.asarray(position, dtype=np.float64))
    _check_inside(pos, side)
    return project(pos, orientation, side, resolution).numpy()


def splat_points(
    samples: Sequence[RaySample], orientation, side: float, resolution: tuple[int, int], eps: float = SPLAT_EPS
) -> FeaturePlane:
    """Splat enriched samples onto one plane. An empty list gives a zero plane."""
    orientation = Orientation(orientation)
    h, w = resolution
    if not samples:
        return FeaturePlane(orientation, torch.zeros(h, w, 0, dtype=torch.float64), torch.zeros(h, w, dtype=torch.float64))
    lengths = {np.asarray(s.feature).shape for s in samples}
    if len(lengths) != 1:
        raise ValueError("all samples must share the feature length")
    pos = torch.as_tensor(np.stack([s.position for s in samples]))
    feats = torch.as_tensor(np.stack([np.asarray(s.feature, dtype=np.float64) for s in samples]))
    _check_inside(pos, side)
    grid, mass = splat_features(feats[None], pos[None], orientation, side, resolution, eps=eps)
    return FeaturePlane(orientation, grid[0], mass[0])


@dataclass(frozen=True)
class ViewGeometry:
    """Ray samples of a batch of views, shared by splatting and rendering."""

    origins: torch.Tensor  # (V, P, 3)
    directions: torch.Tensor  # (V, P, 3)
    hit: torch.Tensor  # (V, P)
    depths: torch.Tensor  # (V, P, M)
    positions: torch.Tensor  # (V, P, M, 3)

    @property
    def plucker(self) -> torch.Tensor:
        return plucker(self.origins, self.directions)


def view_geometry(
    rotation: torch.Tensor,
    translation: torch.Tensor,
    intr: Intrinsics,
    side: float,
    m: int,
    jitter: Optional[torch.Generator] = None,
) -> ViewGeometry:
    origins, dirs = camera_rays(rotation, translation, intr)
    t_near, t_far, hit = intersect_cube_batch(origins, dirs, side)
    depths = sample_depths(t_near, t_far, m, jitter)
    positions = origins.unsqueeze(-2) + depths.unsqueeze(-1) * dirs.unsqueeze(-2)
    # float slop at the faces; misses sit at the camera center and are masked anyway
    positions = torch.where(hit[..., None, None], positions.clamp(-side / 2, side / 2), torch.zeros_like(positions))
    return ViewGeometry(origins, dirs, hit, depths, positions)


@dataclass
class SplatOperator:
    """Geometry-only part of batched splatting for V views.

    ``op`` maps per-ray pixel features (V*P, C) to the numerator of every
    plane pixel, laid out (V, 3, H, W). ``static`` holds the already
    normalized splat of the embedding channels.
    """

    op: SparseOperator
    mass: torch.Tensor  # (V*3*H*W,)
    static: Optional[torch.Tensor]  # (V*3*H*W, C_static) or None
    num_views: int
    resolution: tuple[int, int]
    eps: float = SPLAT_EPS

    @classmethod
    def cat(cls, ops: list["SplatOperator"]) -> "SplatOperator":
        """Stack operators of disjoint view sets; views keep their order."""
        if len(ops) == 1:
            return ops[0]
        static = None if ops[0].static is None else torch.cat([o.static for o in ops])
        return cls(
            SparseOperator.block_diag([o.op for o in ops]),
            torch.cat([o.mass for o in ops]),
            static,
            sum(o.num_views for o in ops),
            ops[0].resolution,
            ops[0].eps,
        )

    def apply(self, feature_maps: torch.Tensor) -> dict[Orientation, tuple[torch.Tensor, torch.Tensor]]:
        v, hp, wp, c = feature_maps.shape
        if v != self.num_views:
            raise ValueError(f"operator covers {self.num_views} views, got {v}")
        h, w = self.resolution
        num = self.op @ feature_maps.reshape(v * hp * wp, c)
        grid = num / (self.mass.unsqueeze(-1) + self.eps)
        if self.static is not None:
            grid = torch.cat([grid, self.static], dim=-1)
        grid = grid.view(v, 3, h, w, -1)
        mass = self.mass.view(v, 3, h, w)
        return {o: (grid[:, k], mass[:, k]) for k, o in enumerate(ORIENTATIONS)}


def build_splat_operator(
    geom: ViewGeometry,
    side: float,
    resolution: tuple[int, int],
    plucker_cfg: Optional[HarmonicConfig] = HarmonicConfig(),
    depth_cfg: Optional[HarmonicConfig] = HarmonicConfig(),
    dtype=torch.float32,
    eps: float = SPLAT_EPS,
) -> SplatOperator:
    """Precompute the splat of ``geom``'s views.

    The pixel feature is shared by the M samples of a ray, so its splat is
    one sparse (pixels x rays) product; the embedding channels depend on
    geometry only. Views never share rows or columns of the operator, so each
    view writes only to its own planes.
    """
    v, p, m = geom.depths.shape
    h, w = resolution
    hw = h * w
    rows, cols_sample, vals = [], [], []
    view_off = (torch.arange(v) * 3 * hw).view(v, 1, 1, 1)
    sample_id = torch.arange(v * p * m).view(v, p, m, 1).expand(v, p, m, 4)
    valid = geom.hit.unsqueeze(-1).unsqueeze(-1)
    for k, o in enumerate(ORIENTATIONS):
        index, weights = bilinear_taps(project(geom.positions, o, side, resolution), resolution)
        rows.append(index + view_off + k * hw)
        vals.append(weights * valid)
        cols_sample.append(sample_id)
    rows = torch.cat([r.reshape(-1) for r in rows])
    vals = torch.cat([x.reshape(-1) for x in vals]).to(dtype)
    cols_sample = torch.cat([x.reshape(-1) for x in cols_sample])
    n_rows = 3 * v * hw
    per_ray = SparseOperator(rows, torch.div(cols_sample, m, rounding_mode="floor"), vals, (n_rows, v * p))
    with torch.no_grad():
        mass = per_ray.row_sums()
        static = []
        if plucker_cfg is not None:
            static.append(per_ray @ harmonic(geom.plucker.to(dtype), plucker_cfg).reshape(v * p, -1))
        if depth_cfg is not None:
            per_sample = SparseOperator(rows, cols_sample, vals, (n_rows, v * p * m))
            static.append(per_sample @ harmonic(geom.depths.to(dtype).unsqueeze(-1), depth_cfg).reshape(v * p * m, -1))
        static = torch.cat(static, dim=-1) / (mass.unsqueeze(-1) + eps) if static else None
    return SplatOperator(per_ray, mass, static, v, (h, w), eps)


def splat_view_batch(
    feature_maps: torch.Tensor,
    geom: ViewGeometry,
    side: float,
    resolution: tuple[int, int],
    plucker_cfg: Optional[HarmonicConfig] = HarmonicConfig(),
    depth_cfg: Optional[HarmonicConfig] = HarmonicConfig(),
    eps: float = SPLAT_EPS,
) -> dict[Orientation, tuple[torch.Tensor, torch.Tensor]]:
    """Splat V feature maps (V, H', W', C) onto their own triplanes.

    Same result as running ``splat_features`` on the full f_q of every
    sample. Returns orientation -> (grid (V, H, W, C_splat), mass (V, H, W)).
    """
    op = build_splat_operator(geom, side, resolution, plucker_cfg, depth_cfg, feature_maps.dtype, eps)
    return op.apply(feature_maps)


def splat_view(
    feature_map,
    pose: CameraPose,
    intr: Intrinsics,
    side: float,
    m: int,
    resolution: tuple[int, int],
    cfg: Optional[HarmonicConfig] = HarmonicConfig(),
    depth_cfg: Optional[HarmonicConfig] = None,
    view_index: int = 0,
) -> PerViewTriplane:
    """Splat one (H', W', C) feature map seen from ``pose`` onto its triplane."""
    fmap = torch.as_tensor(feature_map)
    if fmap.dim() != 3:
        raise ValueError("feature_map must be (H', W', C)")
    if tuple(fmap.shape[:2]) != intr.resolution:
        intr = intr.rescaled(tuple(fmap.shape[:2]))
    depth_cfg = cfg if depth_cfg is None else depth_cfg
    rot = torch.as_tensor(pose.rotation, dtype=fmap.dtype)[None]
    trans = torch.as_tensor(pose.translation, dtype=fmap.dtype)[None]
    geom = view_geometry(rot, trans, intr, side, m)
    out = splat_view_batch(fmap[None], geom, side, resolution, cfg, depth_cfg)
    return PerViewTriplane({o: FeaturePlane(o, g[0], wt[0]) for o, (g, wt) in out.items()}, view_index)


def _block_mean(x: torch.Tensor, h: int, w: int, kh: int, kw: int) -> torch.Tensor:
    # x (H, W, ...) -> (h, w, ...)
    rest = x.shape[2:]
    return x.reshape(h, kh, w, kw, *rest).mean(dim=(1, 3))


def resize_plane(plane: FeaturePlane, target: tuple[int, int]) -> FeaturePlane:
    """Average-pool grid and weight grid down to ``target``."""
    hs, ws = plane.shape
    ht, wt = target
    if hs % ht or ws % wt:
        raise ValueError(f"cannot pool {hs}x{ws} to {ht}x{wt}: ratio must be an integer")
    kh, kw = hs // ht, ws // wt
    return FeaturePlane(
        plane.orientation,
        _block_mean(plane.grid, ht, wt, kh, kw),
        _block_mean(plane.weight_grid, ht, wt, kh, kw),
    )


def pool_batch(x: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    """Average-pool (B, H, W, ...) to (B, h, w, ...)."""
    b, hs, ws = x.shape[:3]
    ht, wt = target
    if (hs, ws) == (ht, wt):
        return x
    if hs % ht or ws % wt:
        raise ValueError(f"cannot pool {hs}x{ws} to {ht}x{wt}: ratio must be an integer")
    rest = x.shape[3:]
    return x.reshape(b, ht, hs // ht, wt, ws // wt, *rest).mean(dim=(2, 4))
