"""Pixel-wise cross-attention fusion of N homologous view planes."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .splatting import ORIENTATIONS, FeaturePlane, Orientation


class FusionParams(nn.Module):
    """Learnable fusion planes plus the shared attention projections.

    Each pixel of the learnable plane queries the N view pixels at the same
    location; there is no attention across spatial positions here.
    """

    def __init__(
        self,
        splat_channels: int,
        channels: int,
        plane_shape: tuple[int, int],
        num_heads: int = 2,
        head_dim: int = 16,
        init_std: float = 0.02,
        coverage_mask: bool = False,
    ):
        super().__init__()
        self.channels = channels
        self.num_heads = num_heads
        self.head_dim = head_dim
        self.coverage_mask = coverage_mask
        d = num_heads * head_dim
        h, w = plane_shape
        self.learnable_planes = nn.ParameterDict(
            {o.value: nn.Parameter(torch.randn(h, w, channels) * init_std) for o in ORIENTATIONS}
        )
        self.input_proj = nn.Linear(splat_channels, channels, bias=False)
        self.w_q = nn.Linear(channels, d, bias=False)
        self.w_k = nn.Linear(channels, d, bias=False)
        self.w_v = nn.Linear(channels, d, bias=False)
        self.w_o = nn.Linear(d, channels, bias=False)

    @property
    def attn_dim(self) -> int:
        return self.num_heads * self.head_dim

    def plane(self, orientation) -> torch.Tensor:
        return self.learnable_planes[Orientation(orientation).value]

    def attend(
        self,
        query: torch.Tensor,
        views: torch.Tensor,
        coverage: Optional[torch.Tensor] = None,
        return_weights: bool = False,
    ):
        """query (B, H, W, C) against projected views (B, N, H, W, C).

        Returns (B, H, W, C), and the softmax weights (B, H, W, heads, N)
        when asked.
        """
        k, v = self.keys_values(views)
        return self.attend_kv(query, k, v, coverage, return_weights)

    def keys_values(self, views: torch.Tensor, project_input: bool = False):
        """Per-head keys and values (B, N, H, W, heads, hd) of views (B, N, H, W, C).

        With ``project_input`` the views are raw splat planes and go through
        ``input_proj`` first. Keys and values do not depend on the query, so
        a weave stack computes them once per site.
        """
        if project_input:
            views = self.input_proj(views)
        b, n, h, w, _ = views.shape
        nh, hd = self.num_heads, self.head_dim
        return self.w_k(views).view(b, n, h, w, nh, hd), self.w_v(views).view(b, n, h, w, nh, hd)

    def attend_kv(self, query, k, v, coverage=None, return_weights: bool = False):
        b, h, w = query.shape[:3]
        nh, hd = self.num_heads, self.head_dim
        q = self.w_q(query).view(b, h, w, nh, hd)
        scores = torch.einsum("bxyhd,bnxyhd->bxyhn", q, k) / math.sqrt(hd)
        if self.coverage_mask and coverage is not None:
            covered = (coverage > 0).permute(0, 2, 3, 1).unsqueeze(3)  # (B, H, W, 1, N)
            # pixels no view reaches fall back to plain attention
            covered = covered | ~covered.any(dim=-1, keepdim=True)
            scores = scores.masked_fill(~covered, float("-inf"))
        attn = scores.softmax(dim=-1)
        out = torch.einsum("bxyhn,bnxyhd->bxyhd", attn, v).reshape(b, h, w, nh * hd)
        out = self.w_o(out)
        return (out, attn) if return_weights else out

    def forward(self, query: torch.Tensor, splat_planes: torch.Tensor, coverage: Optional[torch.Tensor] = None):
        """Fuse raw splat planes (B, N, H, W, C_splat) into (B, H, W, C)."""
        return self.attend(query, self.input_proj(splat_planes), coverage)

    def mean(self, splat_planes: torch.Tensor) -> torch.Tensor:
        return self.input_proj(splat_planes).mean(dim=1)


def _stack_planes(view_planes: Sequence[FeaturePlane]):
    if len(view_planes) < 1:
        raise ValueError("need at least one view plane")
    first = view_planes[0]
    for p in view_planes[1:]:
        if p.grid.shape != first.grid.shape or p.orientation != first.orientation:
            raise ValueError("view planes must share orientation and shape")
    grids = torch.stack([p.grid for p in view_planes])[None]
    weights = torch.stack([p.weight_grid for p in view_planes])[None]
    return first.orientation, grids, weights


def fuse_planes(
    params: FusionParams,
    view_planes: Sequence[FeaturePlane],
    query: Optional[torch.Tensor] = None,
    return_weights: bool = False,
):
    """Cross-attention fusion of N planes of one orientation.

    ``query`` defaults to the learnable plane of that orientation.
    """
    orientation, grids, weights = _stack_planes(view_planes)
    if grids.shape[-1] != params.input_proj.in_features:
        raise ValueError("view plane channels do not match the fusion input projection")
    if query is None:
        query = params.plane(orientation)
    if query.shape[:2] != grids.shape[2:4]:
        raise ValueError("query plane and view planes differ in spatial shape")
    out = params.attend(query[None], params.input_proj(grids), weights, return_weights)
    if return_weights:
        out, attn = out
    fused = FeaturePlane(orientation, out[0], weights[0].sum(dim=0))
    return (fused, attn[0]) if return_weights else fused


def fuse_planes_mean(view_planes: Sequence[FeaturePlane], params: Optional[FusionParams] = None) -> FeaturePlane:
    """Per-pixel mean of the (projected, when ``params`` is given) view planes."""
    orientation, grids, weights = _stack_planes(view_planes)
    if params is not None:
        grids = params.input_proj(grids)
    return FeaturePlane(orientation, grids[0].mean(dim=0), weights[0].sum(dim=0))
