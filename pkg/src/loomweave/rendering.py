"""Latent rendering: correct per-view pixel features from the shared triplane."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .geometry import CameraPose, Intrinsics
from ._sparse import SparseOperator
from .splatting import ORIENTATIONS, Orientation, ViewGeometry, project, view_geometry


@dataclass
class Triplane:
    planes: dict[Orientation, torch.Tensor]  # each (H, W, C)

    def __post_init__(self):
        self.planes = {Orientation(k): v for k, v in self.planes.items()}
        if set(self.planes) != set(ORIENTATIONS):
            raise ValueError("a triplane needs XY, YZ and XZ planes")

    def __getitem__(self, key) -> torch.Tensor:
        return self.planes[Orientation(key)]


def border_taps(uv: torch.Tensor, resolution: tuple[int, int]):
    """Bilinear footprint with coordinates clamped to the outermost pixel centers.

    Returns (flat_index, weight), each (..., 4); weights sum to 1.
    """
    h, w = resolution
    u = uv[..., 0].clamp(0, h - 1)
    v = uv[..., 1].clamp(0, w - 1)
    u0 = torch.floor(u).clamp(max=max(h - 2, 0))
    v0 = torch.floor(v).clamp(max=max(w - 2, 0))
    fu, fv = u - u0, v - v0
    u0, v0 = u0.long(), v0.long()
    u1 = (u0 + 1).clamp(max=h - 1)
    v1 = (v0 + 1).clamp(max=w - 1)
    index = torch.stack([u0 * w + v0, u1 * w + v0, u0 * w + v1, u1 * w + v1], dim=-1)
    weights = torch.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], dim=-1)
    return index, weights


def sampling_operator(positions: torch.Tensor, side: float, resolution: tuple[int, int], dtype) -> SparseOperator:
    """Sparse map from stacked plane tokens to per-point features.

    positions (B, Q, 3). Columns index the (B, 3, H, W) token layout of
    ``planes_to_tokens``; each row sums the bilinear samples of the three
    planes at that point.
    """
    b, q, _ = positions.shape
    h, w = resolution
    hw = h * w
    rows = torch.arange(b * q).view(b, q, 1).expand(b, q, 4)
    scene_off = (torch.arange(b) * 3 * hw).view(b, 1, 1)
    all_rows, all_cols, all_vals = [], [], []
    for k, o in enumerate(ORIENTATIONS):
        index, weights = border_taps(project(positions, o, side, resolution), resolution)
        all_rows.append(rows)
        all_cols.append(index + scene_off + k * hw)
        all_vals.append(weights)
    cat = lambda xs: torch.cat([x.reshape(-1) for x in xs])
    return SparseOperator(cat(all_rows), cat(all_cols), cat(all_vals).to(dtype), (b * q, b * 3 * hw))


def sample_planes(planes: dict, positions: torch.Tensor, side: float, combine: str = "sum") -> torch.Tensor:
    """Bilinearly sample batched planes at 3D positions.

    planes: orientation -> (B, H, W, C); positions (B, Q, 3) -> (B, Q, C) for
    ``combine='sum'`` or (B, Q, 3C) for ``'concat'``. Coordinates are clamped
    to the outermost pixel centers.
    """
    b, q, _ = positions.shape
    h, w, c = planes[Orientation.XY].shape[1:]
    dtype = planes[Orientation.XY].dtype
    if combine == "sum":
        op = sampling_operator(positions, side, (h, w), dtype)
        tokens = torch.cat([planes[o].reshape(b, h * w, c) for o in ORIENTATIONS], dim=1)
        return (op @ tokens.reshape(-1, c)).view(b, q, c)
    if combine == "concat":
        feats = []
        for o in ORIENTATIONS:
            index, weights = border_taps(project(positions, o, side, (h, w)), (h, w))
            rows = torch.arange(b * q).view(b, q, 1).expand(b, q, 4)
            cols = index + (torch.arange(b) * h * w).view(b, 1, 1)
            op = SparseOperator(rows.reshape(-1), cols.reshape(-1), weights.reshape(-1).to(dtype), (b * q, b * h * w))
            feats.append((op @ planes[o].reshape(-1, c)).view(b, q, c))
        return torch.cat(feats, dim=-1)
    raise ValueError(f"unknown triplane combine rule {combine!r}")


def sample_triplane(tri: Triplane, position, side: float) -> torch.Tensor:
    pos = torch.as_tensor(np.asarray(position, dtype=np.float64))
    if pos.abs().max() > side / 2 + 1e-9:
        raise ValueError("position lies outside the cube")
    planes = {o: tri[o][None] for o in ORIENTATIONS}
    return sample_planes(planes, pos.reshape(1, 1, 3).to(tri[Orientation.XY].dtype), side)[0, 0]


class RenderParams(nn.Module):
    """MLP decoder D on [f_p, g_m] and linear importance head L on its output."""

    def __init__(
        self,
        pixel_channels: int,
        triplane_channels: int,
        hidden: Optional[int] = None,
        depth: int = 2,
        combine: str = "sum",
    ):
        super().__init__()
        hidden = hidden or 4 * pixel_channels
        self.combine = combine
        self.pixel_channels = pixel_channels
        self.triplane_channels = triplane_channels
        # concat mode projects the 3C plane features back to C
        self.combine_proj = nn.Linear(3 * triplane_channels, triplane_channels) if combine == "concat" else None
        layers: list[nn.Module] = []
        width = pixel_channels + triplane_channels
        for _ in range(depth):
            layers += [nn.Linear(width, hidden), nn.SiLU()]
            width = hidden
        layers.append(nn.Linear(width, pixel_channels))
        self.decoder = nn.Sequential(*layers)
        self.importance = nn.Linear(pixel_channels, 1)

    def sample(self, planes: dict, positions: torch.Tensor, side: float) -> torch.Tensor:
        g = sample_planes(planes, positions, side, self.combine)
        return self.combine_proj(g) if self.combine_proj is not None else g

    def _aggregate(self, corrected: torch.Tensor, return_weights: bool):
        w = self.importance(corrected).squeeze(-1).softmax(dim=-1)
        out = (w.unsqueeze(-1) * corrected).sum(dim=-2)
        return (out, w) if return_weights else out

    def correct(self, f_p: torch.Tensor, g: torch.Tensor, return_weights: bool = False):
        """f_p (..., C_pix), g (..., M, C_tri) -> (..., C_pix)."""
        m = g.shape[-2]
        if m < 1:
            raise ValueError("need at least one sample per ray")
        f = f_p.unsqueeze(-2).expand(*f_p.shape[:-1], m, f_p.shape[-1])
        return self._aggregate(self.decoder(torch.cat([f, g], dim=-1)), return_weights)

    def correct_from_planes(
        self,
        f_p: torch.Tensor,
        planes: dict,
        positions: torch.Tensor,
        side: float,
        return_weights=False,
        op: Optional[SparseOperator] = None,
    ):
        """Same as ``correct(f_p, sample(planes, positions))`` for the sum rule.

        f_p (B, R, C_pix), positions (B, R, M, 3). The first decoder layer is
        linear in g, so it is applied to the plane tokens before sampling.
        ``op`` may carry a prebuilt ``sampling_operator`` for ``positions``.
        """
        if self.combine != "sum":
            b, r, m, _ = positions.shape
            g = self.sample(planes, positions.reshape(b, r * m, 3), side).reshape(b, r, m, -1)
            return self.correct(f_p, g, return_weights)
        b, r, m, _ = positions.shape
        h, w, c = planes[Orientation.XY].shape[1:]
        first = self.decoder[0]
        w_pix, w_tri = first.weight.split([self.pixel_channels, self.triplane_channels], dim=1)
        tokens = torch.cat([planes[o].reshape(b, h * w, c) for o in ORIENTATIONS], dim=1).reshape(-1, c)
        if op is None:
            op = sampling_operator(positions.reshape(b, r * m, 3), side, (h, w), tokens.dtype)
        hidden = (op @ (tokens @ w_tri.T)).view(b, r, m, -1)
        hidden = hidden + (f_p @ w_pix.T + first.bias).unsqueeze(-2)
        return self._aggregate(self.decoder[1:](hidden), return_weights)


def correct_ray_feature(params: RenderParams, f_p, samples, return_weights: bool = False):
    f_p = torch.as_tensor(f_p)
    g = torch.as_tensor(samples)
    if g.dim() != 2 or g.shape[0] < 1:
        raise ValueError("samples must be a nonempty (M, C_tri) array")
    return params.correct(f_p, g, return_weights)


def render_views(
    params: RenderParams,
    planes: dict,
    feature_maps: torch.Tensor,
    geom: ViewGeometry,
    side: float,
    return_weights: bool = False,
    op: Optional[SparseOperator] = None,
):
    """Correct batched view features.

    planes: orientation -> (B, H, W, C) shared by the views of each scene;
    feature_maps (B, N, H', W', C_pix); geom holds the rays of the B*N views.
    Pixels whose rays miss the cube are passed through untouched.
    """
    b, n, hp, wp, c = feature_maps.shape
    m = geom.depths.shape[-1]
    pos = geom.positions.to(feature_maps.dtype).reshape(b, n * hp * wp, m, 3)
    f_p = feature_maps.reshape(b, n * hp * wp, c)
    out = params.correct_from_planes(f_p, planes, pos, side, return_weights, op)
    if return_weights:
        out, w = out
        w = w.reshape(b, n, hp * wp, m)
    hit = geom.hit.reshape(b, n * hp * wp, 1)
    out = torch.where(hit, out, f_p).reshape(b, n, hp, wp, c)
    return (out, w) if return_weights else out


def render_feature_map(
    params: RenderParams,
    tri: Triplane,
    feature_map,
    pose: CameraPose,
    intr: Intrinsics,
    side: float,
    m: int,
) -> torch.Tensor:
    """Correct one (H', W', C_pix) feature map against a triplane."""
    fmap = torch.as_tensor(feature_map)
    if tuple(fmap.shape[:2]) != intr.resolution:
        intr = intr.rescaled(tuple(fmap.shape[:2]))
    rot = torch.as_tensor(pose.rotation, dtype=fmap.dtype)[None]
    trans = torch.as_tensor(pose.translation, dtype=fmap.dtype)[None]
    geom = view_geometry(rot, trans, intr, side, m)
    planes = {o: tri[o][None] for o in ORIENTATIONS}
    return render_views(params, planes, fmap[None, None], geom, side)[0, 0]
