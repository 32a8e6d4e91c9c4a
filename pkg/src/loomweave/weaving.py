"""Timestep-conditioned self-attention over the tokens of all three planes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .fusion import FusionParams
from .splatting import ORIENTATIONS, FeaturePlane, Orientation


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Standard transformer timestep embedding, (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class TimestepEmbedder(nn.Module):
    """Sinusoidal embedding of an integer timestep followed by a 2-layer MLP."""

    def __init__(self, dim: int, num_steps: int, freq_dim: int = 64):
        super().__init__()
        self.num_steps = num_steps
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t) -> torch.Tensor:
        t = torch.as_tensor(t).reshape(-1)
        if t.dtype.is_floating_point and not torch.equal(t, t.round()):
            raise ValueError("timesteps must be integers")
        if t.numel() and (int(t.min()) < 0 or int(t.max()) > self.num_steps):
            raise ValueError(f"timestep outside [0, {self.num_steps}]")
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sinusoidal_embedding(t, self.freq_dim).to(dtype))


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class AdaLN(nn.Module):
    """LayerNorm without affine terms, then a per-channel shift/scale from the timestep."""

    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels, elementwise_affine=False, eps=1e-6)
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(cond_dim, 2 * channels))
        nn.init.zeros_(self.modulation[-1].weight)
        nn.init.zeros_(self.modulation[-1].bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        shift, scale = self.modulation(cond).chunk(2, dim=-1)
        return modulate(self.norm(x), shift, scale)


def multihead_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, num_heads: int) -> torch.Tensor:
    """(B, L, d) inputs, heads split on the channel axis."""
    b, l, d = q.shape
    hd = d // num_heads
    q = q.view(b, l, num_heads, hd).transpose(1, 2)
    k = k.view(b, -1, num_heads, hd).transpose(1, 2)
    v = v.view(b, -1, num_heads, hd).transpose(1, 2)
    attn = (q @ k.transpose(-2, -1) / math.sqrt(hd)).softmax(dim=-1)
    return (attn @ v).transpose(1, 2).reshape(b, l, d)


class WeaveBlockParams(nn.Module):
    """One pre-norm transformer block with AdaLN and an optional positional table.

    The positional table is added to the attention input only, so zeroing
    the output projections makes the block an exact identity.
    """

    def __init__(
        self,
        channels: int,
        num_tokens: int,
        cond_dim: int,
        num_heads: int = 2,
        head_dim: int = 16,
        mlp_ratio: int = 4,
        use_pos_embedding: bool = True,
    ):
        super().__init__()
        self.num_heads = num_heads
        d = num_heads * head_dim
        self.adaln1 = AdaLN(channels, cond_dim)
        self.adaln2 = AdaLN(channels, cond_dim)
        self.qkv = nn.Linear(channels, 3 * d)
        self.proj = nn.Linear(d, channels)
        self.mlp = nn.Sequential(
            nn.Linear(channels, mlp_ratio * channels),
            nn.GELU(approximate="tanh"),
            nn.Linear(mlp_ratio * channels, channels),
        )
        self.pos_embedding = nn.Parameter(torch.randn(num_tokens, channels) * 0.02) if use_pos_embedding else None

    def zero_output_projections(self):
        for layer in (self.proj, self.mlp[-1]):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        h = self.adaln1(x, cond)
        if self.pos_embedding is not None:
            h = h + self.pos_embedding
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        x = x + self.proj(multihead_attention(q, k, v, self.num_heads))
        return x + self.mlp(self.adaln2(x, cond))


@dataclass
class TriplaneTokens:
    """Planes flattened row-major and concatenated in XY, YZ, XZ order."""

    tokens: torch.Tensor  # (3*H*W, C) or (B, 3*H*W, C)
    plane_shape: tuple[int, int]

    def __post_init__(self):
        h, w = self.plane_shape
        if self.tokens.shape[-2] != 3 * h * w:
            raise ValueError(f"expected {3 * h * w} tokens, got {self.tokens.shape[-2]}")

    @classmethod
    def from_planes(cls, planes) -> "TriplaneTokens":
        grids = [_grid(planes[o]) for o in ORIENTATIONS]
        h, w = grids[0].shape[-3:-1]
        return cls(torch.cat([g.flatten(-3, -2) for g in grids], dim=-2), (h, w))

    def to_planes(self) -> dict[Orientation, torch.Tensor]:
        h, w = self.plane_shape
        chunks = self.tokens.split(h * w, dim=-2)
        return {o: c.unflatten(-2, (h, w)) for o, c in zip(ORIENTATIONS, chunks)}


def _grid(p):
    return p.grid if isinstance(p, FeaturePlane) else p


def planes_to_tokens(planes: dict[Orientation, torch.Tensor]) -> torch.Tensor:
    """(B, H, W, C) per orientation -> (B, 3*H*W, C)."""
    return torch.cat([planes[o].flatten(1, 2) for o in ORIENTATIONS], dim=1)


def tokens_to_planes(tokens: torch.Tensor, plane_shape: tuple[int, int]) -> dict[Orientation, torch.Tensor]:
    h, w = plane_shape
    return {o: c.unflatten(1, (h, w)) for o, c in zip(ORIENTATIONS, tokens.split(h * w, dim=1))}


def weave_block(
    params: WeaveBlockParams, tokens: TriplaneTokens, timestep: int, embedder: TimestepEmbedder
) -> TriplaneTokens:
    x = tokens.tokens
    batched = x.dim() == 3
    x = x if batched else x[None]
    cond = embedder(torch.tensor([int(timestep)] * x.shape[0]))
    out = params(x, cond)
    return TriplaneTokens(out if batched else out[0], tokens.plane_shape)


class WeaveStack(nn.Module):
    """Fusion + weaving repeated ``iterations`` times at one communication site.

    Iteration k fuses the original per-view splat planes using the previous
    iteration's planes as the query, adds the fused result to that query
    and weaves the sum. Each iteration owns its weave block.
    """

    def __init__(
        self,
        fusion: FusionParams,
        plane_shape: tuple[int, int],
        iterations: int,
        num_steps: int,
        num_heads: int = 2,
        head_dim: int = 16,
        mlp_ratio: int = 4,
        use_pos_embedding: bool = True,
        fusion_mode: str = "attention",
    ):
        super().__init__()
        if iterations < 1:
            raise ValueError("iterations must be >= 1")
        if fusion_mode not in ("attention", "mean"):
            raise ValueError(f"unknown fusion mode {fusion_mode!r}")
        self.fusion = fusion
        self.fusion_mode = fusion_mode
        self.plane_shape = tuple(plane_shape)
        c = fusion.channels
        cond_dim = c
        self.embedder = TimestepEmbedder(cond_dim, num_steps)
        n_tokens = 3 * plane_shape[0] * plane_shape[1]
        self.blocks = nn.ModuleList(
            WeaveBlockParams(c, n_tokens, cond_dim, num_heads, head_dim, mlp_ratio, use_pos_embedding)
            for _ in range(iterations)
        )

    def _prepare(self, splat: dict):
        # the three orientations share the fusion weights, so fold them into the batch
        grids = torch.cat([splat[o][0] for o in ORIENTATIONS])
        weights = torch.cat([splat[o][1] for o in ORIENTATIONS])
        if self.fusion_mode == "mean":
            return self.fusion.mean(grids), None, weights
        k, v = self.fusion.keys_values(grids, project_input=True)
        return k, v, weights

    def _fuse_stacked(self, query: torch.Tensor, prepared) -> torch.Tensor:
        k, v, weights = prepared
        if self.fusion_mode == "mean":
            return query + k
        return query + self.fusion.attend_kv(query, k, v, weights)

    def forward(self, splat: dict, timesteps: torch.Tensor, initial: Optional[dict] = None) -> dict:
        """splat: orientation -> (grids (B, N, H, W, C_splat), weights (B, N, H, W)).

        ``initial`` (orientation -> (B, H, W, C)) is added to the learnable
        planes to form the first query. Returns the woven planes.
        """
        b = next(iter(splat.values()))[0].shape[0]
        h, w = self.plane_shape
        base = torch.stack([self.fusion.plane(o) for o in ORIENTATIONS]).unsqueeze(1)
        query = base.expand(3, b, h, w, base.shape[-1])
        if initial is not None:
            query = query + torch.stack([initial[o] for o in ORIENTATIONS])
        query = query.reshape(3 * b, h, w, -1)
        prepared = self._prepare(splat)
        cond = self.embedder(timesteps)
        for block in self.blocks:
            fused = self._fuse_stacked(query, prepared)
            # (3B, H, W, C) -> (B, 3HW, C), XY then YZ then XZ
            tokens = fused.view(3, b, h * w, -1).transpose(0, 1).reshape(b, 3 * h * w, -1)
            tokens = block(tokens, cond)
            query = tokens.view(b, 3, h * w, -1).transpose(0, 1).reshape(3 * b, h, w, -1)
        out = query.view(3, b, h, w, -1)
        return {o: out[i] for i, o in enumerate(ORIENTATIONS)}


def weave_stack(
    stack: WeaveStack,
    per_view_planes: Sequence,
    timestep: int,
    iterations: Optional[int] = None,
    initial: Optional[dict] = None,
):
    """Run a site on unbatched per-view triplanes; returns the woven Triplane.

    ``per_view_planes`` is a sequence of PerViewTriplane. ``iterations``, if
    given, must match the number of blocks the stack owns.
    """
    from .rendering import Triplane

    if iterations is not None and iterations != len(stack.blocks):
        raise ValueError(f"stack has {len(stack.blocks)} blocks, asked for {iterations} iterations")
    if not per_view_planes:
        raise ValueError("need at least one view")
    splat = {}
    for o in ORIENTATIONS:
        grids = torch.stack([pv[o].grid for pv in per_view_planes])[None]
        weights = torch.stack([pv[o].weight_grid for pv in per_view_planes])[None]
        splat[o] = (grids, weights)
    init = None if initial is None else {Orientation(k): v[None] for k, v in initial.items()}
    out = stack(splat, torch.tensor([int(timestep)]), init)
    return Triplane({o: out[o][0] for o in ORIENTATIONS})
