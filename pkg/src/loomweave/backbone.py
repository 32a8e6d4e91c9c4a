"""Shared-weight UNet run on N views in parallel, with communication sites.

Every view goes through the same parameters. At the bottleneck and at each
decoder level the per-view features are splatted onto per-view triplanes,
fused and woven into one shared triplane per scene. The final site (or every
site, for the ablation) renders the shared triplane back into each view's
features.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .fusion import FusionParams
from .geometry import CameraPose, HarmonicConfig, Intrinsics, embed_dim, harmonic
from ._sparse import SparseOperator
from .rendering import RenderParams, render_views, sampling_operator
from .splatting import ORIENTATIONS, SplatOperator, ViewGeometry, build_splat_operator, pool_batch, view_geometry
from .weaving import WeaveStack, sinusoidal_embedding


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    image_channels: int = 3
    widths: tuple[int, ...] = (32, 64)
    bottleneck_width: int = 64
    temb_dim: int = 128
    groups: int = 8
    num_steps: int = 100
    cube_side: float = 1.5
    m_samples: int = 8
    splat_res: int = 16
    triplane_res: int = 16
    triplane_channels: int = 128
    num_heads: int = 2
    head_dim: int = 16
    mlp_ratio: int = 4
    site_iterations: tuple[int, ...] = (3, 4, 6)
    fusion_mode: str = "attention"
    use_pe: bool = True
    render_sites: str = "final"
    harmonic_frequencies: int = 4
    fov_deg: float = 49.1

    def __post_init__(self):
        if len(self.site_iterations) < 1 or len(self.site_iterations) > len(self.widths) + 1:
            raise ValueError("site count must be between 1 and decoder depth + 1")
        if any(i < 1 for i in self.site_iterations):
            raise ValueError("site iteration counts must be >= 1")
        if self.fusion_mode not in ("attention", "mean"):
            raise ValueError(f"fusion_mode must be 'attention' or 'mean', got {self.fusion_mode!r}")
        if self.render_sites not in ("final", "all"):
            raise ValueError(f"render_sites must be 'final' or 'all', got {self.render_sites!r}")
        if self.splat_res % self.triplane_res:
            raise ValueError("splat_res must be a multiple of triplane_res")
        if self.image_size % (2 ** len(self.widths)):
            raise ValueError("image_size must be divisible by 2**levels")
        if self.m_samples < 1:
            raise ValueError("m_samples must be >= 1")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        """Reference dimensions: 4 levels, 32x32x512 triplane, 8x64 heads, M=16."""
        base = dict(
            image_size=32,
            image_channels=4,
            widths=(320, 640, 1280, 1280),
            bottleneck_width=1280,
            temb_dim=1280,
            groups=32,
            num_steps=1000,
            m_samples=16,
            splat_res=64,
            triplane_res=32,
            triplane_channels=512,
            num_heads=8,
            head_dim=64,
            site_iterations=(3, 4, 6, 8),
        )
        base.update(overrides)
        return cls(**base)

    @property
    def harmonic_config(self) -> Optional[HarmonicConfig]:
        return HarmonicConfig(self.harmonic_frequencies) if self.use_pe else None

    @property
    def splat_extra_channels(self) -> int:
        cfg = self.harmonic_config
        return embed_dim(cfg, 6) + embed_dim(cfg, 1)


POSE_HARMONIC = HarmonicConfig(4, include_input=True)


@dataclass
class ViewPoses:
    """Batched view cameras in the reference-aligned frame.

    The frame is the world rotated about +z so the reference camera sits at
    azimuth 0; ``relative`` holds (d_elevation, d_azimuth, d_radius) per view
    with angles in radians.
    """

    rotation: torch.Tensor  # (B, N, 3, 3)
    translation: torch.Tensor  # (B, N, 3)
    relative: torch.Tensor  # (B, N, 3)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.rotation.shape[:2])

    @classmethod
    def from_cameras(cls, scenes: Sequence[Sequence[CameraPose]], references: Optional[Sequence[CameraPose]] = None):
        """One pose list per scene; the reference defaults to each list's first pose."""
        rots, trans, rel = [], [], []
        for i, poses in enumerate(scenes):
            ref = poses[0] if references is None else references[i]
            r, t, f = zip(*(relative_pose(p, ref) for p in poses))
            rots.append(np.stack(r))
            trans.append(np.stack(t))
            rel.append(np.stack(f))
        return cls(torch.as_tensor(np.stack(rots)), torch.as_tensor(np.stack(trans)), torch.as_tensor(np.stack(rel)))

    def index(self, idx) -> "ViewPoses":
        """Select / reorder views along the N axis."""
        return ViewPoses(self.rotation[:, idx], self.translation[:, idx], self.relative[:, idx])

    def to(self, dtype) -> "ViewPoses":
        return ViewPoses(self.rotation.to(dtype), self.translation.to(dtype), self.relative.to(dtype))


def relative_pose(pose: CameraPose, reference: CameraPose):
    """(rotation, translation, relative features) of ``pose`` in the frame of ``reference``."""
    ref_elev, ref_azim, ref_radius = reference.spherical()
    aligned = pose.rotated_about_z(-ref_azim)
    elev, azim, radius = aligned.spherical()
    d_azim = (azim + 180.0) % 360.0 - 180.0
    feats = np.array([math.radians(elev - ref_elev), math.radians(d_azim), radius - ref_radius])
    return aligned.rotation, aligned.translation, feats


@dataclass
class SiteGeometry:
    """Rays of B*N views at one feature resolution plus the operators built from them."""

    geom: ViewGeometry
    splat: SplatOperator
    sample: Optional[SparseOperator]

    @classmethod
    def cat(cls, items: list["SiteGeometry"]) -> "SiteGeometry":
        if len(items) == 1:
            return items[0]
        geom = ViewGeometry(*(torch.cat([getattr(i.geom, f.name) for i in items]) for f in fields(ViewGeometry)))
        sample = None if items[0].sample is None else SparseOperator.block_diag([i.sample for i in items])
        return cls(geom, SplatOperator.cat([i.splat for i in items]), sample)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(math.gcd(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(math.gcd(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CommunicationSite(nn.Module):
    """splat -> (fuse -> weave) x iterations -> optional latent rendering."""

    def __init__(self, feat_channels: int, cfg: ModelConfig, iterations: int, render: bool):
        super().__init__()
        self.cfg = cfg
        t = cfg.triplane_res
        fusion = FusionParams(
            feat_channels + cfg.splat_extra_channels, cfg.triplane_channels, (t, t), cfg.num_heads, cfg.head_dim
        )
        self.stack = WeaveStack(
            fusion,
            (t, t),
            iterations,
            cfg.num_steps,
            cfg.num_heads,
            cfg.head_dim,
            cfg.mlp_ratio,
            use_pos_embedding=cfg.use_pe,
            fusion_mode=cfg.fusion_mode,
        )
        self.renderer = RenderParams(feat_channels, cfg.triplane_channels) if render else None

    @property
    def fusion(self) -> FusionParams:
        return self.stack.fusion

    def forward(self, feats: torch.Tensor, geom, timesteps: torch.Tensor, carry: Optional[dict], capture=None):
        """feats (B, N, C, h, w) -> (corrected feats, woven planes)."""
        cfg = self.cfg
        b, n, c, h, w = feats.shape
        hwc = feats.permute(0, 1, 3, 4, 2)
        splat = geom.splat.apply(hwc.reshape(b * n, h, w, c))
        tri = (cfg.triplane_res, cfg.triplane_res)
        grouped = {}
        for o, (grid, mass) in splat.items():
            grid, mass = pool_batch(grid, tri), pool_batch(mass, tri)
            grouped[o] = (grid.reshape(b, n, *tri, -1), mass.reshape(b, n, *tri))
        planes = self.stack(grouped, timesteps, carry)
        if capture is not None:
            capture.append({"splat": grouped, "planes": planes})
        if self.renderer is not None:
            hwc = render_views(self.renderer, planes, hwc, geom.geom, cfg.cube_side, op=geom.sample)
            feats = hwc.permute(0, 1, 4, 2, 3)
        return feats, planes


class LoomBackbone(nn.Module):
    """Noise predictor f_theta shared by all N views."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        ch = cfg.image_channels
        td = cfg.temb_dim
        self.time_mlp = nn.Sequential(nn.Linear(cfg.widths[0], td), nn.SiLU(), nn.Linear(td, td))
        self.pose_mlp = nn.Sequential(nn.Linear(POSE_HARMONIC.out_dim(3), td), nn.SiLU(), nn.Linear(td, td))
        self.in_conv = nn.Conv2d(2 * ch, cfg.widths[0], 3, padding=1)

        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = cfg.widths[0]
        for width in cfg.widths:
            self.enc.append(ResBlock(prev, width, td, cfg.groups))
            self.down.append(nn.Conv2d(width, width, 3, stride=2, padding=1))
            prev = width
        self.mid = ResBlock(prev, cfg.bottleneck_width, td, cfg.groups)
        prev = cfg.bottleneck_width
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for width in reversed(cfg.widths):
            self.up.append(nn.Conv2d(prev, prev, 3, padding=1))
            self.dec.append(ResBlock(prev + width, width, td, cfg.groups))
            prev = width
        self.out_norm = nn.GroupNorm(math.gcd(cfg.groups, prev), prev)
        self.out_conv = nn.Conv2d(prev, ch, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

        site_channels = [cfg.bottleneck_width] + list(reversed(cfg.widths))
        n_sites = len(cfg.site_iterations)
        self._geometry_cache: OrderedDict = OrderedDict()
        self.geometry_cache_size = 64
        self.sites = nn.ModuleList(
            CommunicationSite(
                site_channels[s],
                cfg,
                cfg.site_iterations[s],
                render=(cfg.render_sites == "all" or s == n_sites - 1),
            )
            for s in range(n_sites)
        )

    def communication_parameters(self):
        return self.sites.parameters()

    def backbone_parameters(self):
        site_ids = {id(p) for p in self.sites.parameters()}
        return (p for p in self.parameters() if id(p) not in site_ids)

    def fusion_planes(self) -> list[dict]:
        return [{o: site.fusion.plane(o) for o in ORIENTATIONS} for site in self.sites]

    def _scene_geometry(self, rot: torch.Tensor, trans: torch.Tensor, res: int, render: bool, dtype, jitter):
        """Geometry and operators for one scene's N views (float64 poses)."""
        cfg = self.cfg
        key = None
        if jitter is None:
            key = (rot.numpy().tobytes(), trans.numpy().tobytes(), res, render, dtype)
            hit = self._geometry_cache.get(key)
            if hit is not None:
                self._geometry_cache.move_to_end(key)
                return hit
        intr = Intrinsics.from_fov((res, res), cfg.fov_deg)
        geom = view_geometry(rot, trans, intr, cfg.cube_side, cfg.m_samples, jitter)
        hcfg = cfg.harmonic_config
        splat = build_splat_operator(geom, cfg.cube_side, (cfg.splat_res, cfg.splat_res), hcfg, hcfg, dtype)
        sample = None
        if render:
            t = cfg.triplane_res
            sample = sampling_operator(geom.positions.to(dtype).reshape(1, -1, 3), cfg.cube_side, (t, t), dtype)
        out = SiteGeometry(geom, splat, sample)
        if key is not None and self.geometry_cache_size > 0:
            self._geometry_cache[key] = out
            while len(self._geometry_cache) > self.geometry_cache_size:
                self._geometry_cache.popitem(last=False)
        return out

    def _geometry(self, poses: ViewPoses, res: int, render: bool, dtype, jitter) -> SiteGeometry:
        rot = poses.rotation.detach().to(torch.float64).contiguous()
        trans = poses.translation.detach().to(torch.float64).contiguous()
        return SiteGeometry.cat(
            [self._scene_geometry(rot[i], trans[i], res, render, dtype, jitter) for i in range(rot.shape[0])]
        )

    def forward(
        self,
        latents: torch.Tensor,
        timesteps: torch.Tensor,
        reference: torch.Tensor,
        poses: ViewPoses,
        capture: Optional[list] = None,
        jitter: Optional[torch.Generator] = None,
    ) -> torch.Tensor:
        """latents (B, N, C, H, W), timesteps (B,), reference (B, C, H, W) -> noise (B, N, C, H, W)."""
        cfg = self.cfg
        b, n, c, h, w = latents.shape
        if reference.shape != (b, c, h, w):
            raise ValueError(f"reference shape {tuple(reference.shape)} does not match latents {(b, c, h, w)}")
        if poses.shape != (b, n):
            raise ValueError(f"pose batch {poses.shape} does not match latents {(b, n)}")
        timesteps = torch.as_tensor(timesteps).reshape(-1)
        if timesteps.shape[0] != b:
            raise ValueError("need one timestep per scene")
        if int(timesteps.min()) < 0 or int(timesteps.max()) > cfg.num_steps:
            raise ValueError(f"timestep outside [0, {cfg.num_steps}]")
        dtype = self.in_conv.weight.dtype

        temb = self.time_mlp(sinusoidal_embedding(timesteps, cfg.widths[0]).to(dtype))
        pemb = self.pose_mlp(harmonic(poses.relative.to(dtype), POSE_HARMONIC))
        temb = (temb[:, None] + pemb).reshape(b * n, -1)

        x = torch.cat([latents, reference[:, None].expand_as(latents)], dim=2).reshape(b * n, 2 * c, h, w)
        x = self.in_conv(x.to(dtype))
        skips = []
        for block, down in zip(self.enc, self.down):
            x = block(x, temb)
            skips.append(x)
            x = down(x)
        x = self.mid(x, temb)

        carry = None
        site_iter = iter(self.sites)
        geoms: dict[int, object] = {}

        def communicate(x, carry):
            site = next(site_iter, None)
            if site is None:
                return x, carry
            res = x.shape[-1]
            key = (res, site.renderer is not None)
            if key not in geoms:
                geoms[key] = self._geometry(poses, res, key[1], dtype, jitter)
            feats, carry = site(x.reshape(b, n, *x.shape[1:]), geoms[key], timesteps, carry, capture)
            return feats.reshape(b * n, *x.shape[1:]), carry

        x, carry = communicate(x, carry)
        for up, block, skip in zip(self.up, self.dec, reversed(skips)):
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
            x = block(torch.cat([x, skip], dim=1), temb)
            x, carry = communicate(x, carry)
        out = self.out_conv(F.silu(self.out_norm(x)))
        return out.reshape(b, n, c, h, w)
