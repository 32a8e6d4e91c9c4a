"""Procedural box/sphere scenes, a ray caster and the on-disk multi-view dataset.

Dataset layout::

    <root>/manifest.txt               key=value, one per line
    <root>/<scene_id>/view_<k>.png    8-bit RGB
    <root>/<scene_id>/cameras.txt     one line per view, see CAMERA_FIELDS
    <root>/<scene_id>/scene.json      the SceneSpec

Camera lines hold, in order: view index, elevation and azimuth (degrees),
radius, the world->camera rotation R (9 values, row-major), translation T
(3 values), focal length and principal point (cx, cy) in pixels, height and
width. Vectors are comma separated.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .geometry import DEFAULT_CUBE_SIDE, DEFAULT_FOV_DEG, CameraPose, Intrinsics

FORMAT_VERSION = 1
CAMERA_FIELDS = ("view", "elevation", "azimuth", "radius", "R", "T", "focal", "cx", "cy", "height", "width")
# every point within this distance of the origin is in view from radius 2 at the default FOV
VISIBLE_RADIUS = 0.8
FIXED_LIGHT = np.array([0.4, -0.3, 0.866]) / np.linalg.norm([0.4, -0.3, 0.866])
AMBIENT = 0.3


@dataclass(frozen=True)
class Primitive:
    """A sphere (``size`` = radius) or axis-aligned box (``size`` = edge lengths)."""

    kind: str
    center: tuple[float, float, float]
    size: object
    color: tuple[float, float, float]

    def __post_init__(self):
        if self.kind not in ("box", "sphere"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        object.__setattr__(self, "center", tuple(float(v) for v in np.reshape(self.center, 3)))
        object.__setattr__(self, "color", tuple(float(v) for v in np.reshape(self.color, 3)))
        if self.kind == "sphere":
            size = float(np.reshape(self.size, -1)[0]) if np.ndim(self.size) else float(self.size)
        else:
            size = np.broadcast_to(np.asarray(self.size, dtype=np.float64), (3,))
            size = tuple(float(v) for v in size)
        if np.any(np.asarray(size) <= 0):
            raise ValueError("primitive size must be positive")
        if not all(0.0 <= c <= 1.0 for c in self.color):
            raise ValueError("colors must lie in [0, 1]")
        object.__setattr__(self, "size", size)

    @property
    def half_extent(self) -> np.ndarray:
        """Half widths of the axis-aligned bounding box."""
        if self.kind == "sphere":
            return np.full(3, self.size)
        return np.asarray(self.size) / 2

    @property
    def bounding_radius(self) -> float:
        """Radius of the smallest origin-centered ball holding the primitive."""
        c = np.asarray(self.center)
        if self.kind == "sphere":
            return float(np.linalg.norm(c) + self.size)
        return float(np.linalg.norm(np.abs(c) + self.half_extent))

    def inside_cube(self, side: float = DEFAULT_CUBE_SIDE) -> bool:
        return bool(np.all(np.abs(self.center) + self.half_extent <= side / 2 + 1e-12))

    def contains(self, other: "Primitive") -> bool:
        """True if ``other`` lies entirely inside this primitive."""
        c, oc = np.asarray(self.center), np.asarray(other.center)
        if self.kind == "sphere":
            if other.kind == "sphere":
                return np.linalg.norm(oc - c) + other.size <= self.size
            corners = oc + other.half_extent * np.array(np.meshgrid([-1, 1], [-1, 1], [-1, 1])).reshape(3, -1).T
            return bool(np.all(np.linalg.norm(corners - c, axis=1) <= self.size))
        return bool(np.all(np.abs(oc - c) + other.half_extent <= self.half_extent))


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple[Primitive, ...]
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    side: float = DEFAULT_CUBE_SIDE

    def __post_init__(self):
        prims = tuple(self.primitives)
        object.__setattr__(self, "primitives", prims)
        object.__setattr__(self, "background", tuple(float(v) for v in self.background))
        if not 1 <= len(prims) <= 5:
            raise ValueError("a scene holds 1 to 5 primitives")
        if not all(0.0 <= c <= 1.0 for c in self.background):
            raise ValueError("background must lie in [0, 1]")
        for p in prims:
            if not p.inside_cube(self.side):
                raise ValueError(f"primitive at {p.center} leaves the cube")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "side": self.side,
            "background": list(self.background),
            "primitives": [
                {"kind": p.kind, "center": list(p.center), "size": p.size if p.kind == "sphere" else list(p.size),
                 "color": list(p.color)}
                for p in self.primitives
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        prims = tuple(Primitive(p["kind"], p["center"], p["size"], p["color"]) for p in d["primitives"])
        return cls(prims, tuple(d["background"]), int(d["seed"]), float(d.get("side", DEFAULT_CUBE_SIDE)))


def generate_scene(seed: int, side: float = DEFAULT_CUBE_SIDE, max_tries: int = 1000) -> SceneSpec:
    """Deterministic 1-5 primitive scene on a white background.

    Primitives stay inside the cube and inside a ball that every default
    camera sees in full. A candidate that contains, or is contained by, an
    earlier primitive is redrawn.
    """
    rng = np.random.default_rng(seed)
    count = int(rng.integers(1, 6))
    prims: list[Primitive] = []
    for _ in range(max_tries):
        if len(prims) == count:
            break
        kind = "sphere" if rng.random() < 0.5 else "box"
        size = float(rng.uniform(0.15, 0.4)) if kind == "sphere" else rng.uniform(0.25, 0.7, 3)
        half = np.full(3, size) if kind == "sphere" else size / 2
        limit = np.minimum(side / 2, VISIBLE_RADIUS) - half
        center = rng.uniform(-limit, limit)
        color = rng.uniform(0.05, 0.95, 3)
        cand = Primitive(kind, center, size, color)
        if cand.bounding_radius > VISIBLE_RADIUS or not cand.inside_cube(side):
            continue
        if any(p.contains(cand) or cand.contains(p) for p in prims):
            continue
        prims.append(cand)
    return SceneSpec(tuple(prims), (1.0, 1.0, 1.0), int(seed), side)


def _hit_sphere(o, d, center, radius):
    oc = o - center
    b = np.einsum("ij,ij->i", oc, d)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > 1e-9, t0, t1)
    ok &= t > 1e-9
    normal = o + np.where(ok, t, 0.0)[:, None] * d - center
    normal = normal / np.where(ok, radius, 1.0)[:, None]
    return np.where(ok, t, np.inf), normal


def _hit_box(o, d, center, half):
    lo, hi = center - half, center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1, t2 = (lo - o) * inv, (hi - o) * inv
    # parallel rays: inside the slab -> unbounded, outside -> empty
    par = d == 0
    inside = (o >= lo) & (o <= hi)
    t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
    tmin, tmax = np.minimum(t1, t2), np.maximum(t1, t2)
    axis = np.argmax(tmin, axis=1)
    t_near = tmin.max(axis=1)
    t_far = tmax.min(axis=1)
    ok = (t_near <= t_far) & (t_near > 1e-9)
    t = np.where(ok, t_near, np.inf)
    normal = np.zeros_like(o)
    rows = np.arange(o.shape[0])
    normal[rows, axis] = -np.sign(d[rows, axis])
    return t, normal


def world_rays(pose: CameraPose, intr: Intrinsics, supersample: int = 1):
    """Origins and unit directions (H*s*W*s, 3) in world space, row-major."""
    h, w = intr.resolution
    s = int(supersample)
    cx, cy = intr.principal_point
    # sub-pixel centers spread evenly inside each pixel
    offs = (np.arange(s) + 0.5) / s - 0.5
    rows = (np.arange(h)[:, None] + offs[None]).reshape(-1)
    cols = (np.arange(w)[:, None] + offs[None]).reshape(-1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    dirs_cam = np.stack([(cc - cx) / intr.focal, -(rr - cy) / intr.focal, -np.ones_like(rr)], axis=-1).reshape(-1, 3)
    dirs = dirs_cam @ pose.rotation  # R^T applied to each row
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.center, dirs.shape)
    return origins, dirs


def raycast_render(
    scene: SceneSpec,
    pose: CameraPose,
    intr: Intrinsics,
    light: str = "fixed",
    ambient: float = AMBIENT,
    supersample: int = 1,
) -> np.ndarray:
    """Nearest-hit ray casting with Lambert-modulated flat colors.

    A surface point gets ``color * (ambient + (1 - ambient) * max(0, n . l))``.
    ``light='fixed'`` uses one world-space direction; ``'headlight'`` points
    the light along the camera's viewing axis (towards the camera). Returns
    (H, W, 3) float64 in [0, 1].
    """
    if light == "fixed":
        l_dir = FIXED_LIGHT
    elif light == "headlight":
        l_dir = pose.rotation[2]  # camera +z in world coordinates, i.e. back towards the camera
    else:
        raise ValueError(f"unknown light {light!r}")
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    o, d = world_rays(pose, intr, supersample)
    n_rays = d.shape[0]
    best = np.full(n_rays, np.inf)
    color = np.tile(np.asarray(scene.background), (n_rays, 1))
    for p in scene.primitives:
        c = np.asarray(p.center)
        if p.kind == "sphere":
            t, normal = _hit_sphere(o, d, c, p.size)
        else:
            t, normal = _hit_box(o, d, c, p.half_extent)
        closer = t < best
        if not closer.any():
            continue
        shade = ambient + (1 - ambient) * np.clip(normal[closer] @ l_dir, 0.0, None)
        color[closer] = shade[:, None] * np.asarray(p.color)
        best[closer] = t[closer]
    h, w = intr.resolution
    s = supersample
    img = color.reshape(h, s, w, s, 3).mean(axis=(1, 3)) if s > 1 else color.reshape(h, w, 3)
    return np.clip(img, 0.0, 1.0)


@dataclass(frozen=True)
class DatasetManifest:
    num_scenes: int = 10
    views_per_scene: int = 8
    resolution: int = 32
    elevation_mode: str = "fixed"  # fixed | variable
    elevation: float = 30.0
    elevation_range: tuple[float, float] = (-10.0, 40.0)
    azimuth: str = "random"  # random | even
    radius: float = 2.0
    seed: int = 0
    fov_deg: float = DEFAULT_FOV_DEG
    supersample: int = 1
    light: str = "fixed"
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.num_scenes < 1 or self.views_per_scene < 1 or self.resolution < 1:
            raise ValueError("scene count, view count and resolution must be >= 1")
        if self.elevation_mode not in ("fixed", "variable"):
            raise ValueError("elevation_mode must be 'fixed' or 'variable'")
        if self.azimuth not in ("random", "even"):
            raise ValueError("azimuth must be 'random' or 'even'")
        lo, hi = self.elevation_range
        if not -90 <= lo <= hi <= 90 or not -90 <= self.elevation <= 90:
            raise ValueError("elevations must lie within [-90, 90] degrees")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "elevation_range", (float(lo), float(hi)))

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        types = {f: type(getattr(cls(), f)) for f in cls.__dataclass_fields__}
        kw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            if key not in types:
                raise ValueError(f"unknown manifest key {key!r}")
            t = types[key]
            kw[key] = tuple(float(x) for x in value.split(",")) if t is tuple else t(value)
        return cls(**kw)

    def scene_cameras(self, scene_index: int) -> list[tuple[float, float]]:
        """(elevation, azimuth) in degrees for each view of a scene."""
        rng = np.random.default_rng([self.seed, scene_index, 1])
        k = self.views_per_scene
        if self.azimuth == "even":
            azim = np.arange(k) * 360.0 / k
        else:
            azim = rng.uniform(0.0, 360.0, k)
        if self.elevation_mode == "fixed":
            elev = np.full(k, float(self.elevation))
        else:
            elev = rng.uniform(*self.elevation_range, k)
        return [(float(e), float(a)) for e, a in zip(elev, azim)]

    def scene_seed(self, scene_index: int) -> int:
        return int(np.random.SeedSequence([self.seed, scene_index]).generate_state(1)[0])


def scene_id(index: int) -> str:
    return f"scene_{index:04d}"


def format_camera(view: int, elevation: float, azimuth: float, radius: float, pose: CameraPose, intr: Intrinsics) -> str:
    vec = lambda a: ",".join(repr(float(x)) for x in np.reshape(a, -1))
    h, w = intr.resolution
    cx, cy = intr.principal_point
    return (
        f"view={view} elevation={elevation!r} azimuth={azimuth!r} radius={radius!r} "
        f"R={vec(pose.rotation)} T={vec(pose.translation)} focal={intr.focal!r} cx={cx!r} cy={cy!r} "
        f"height={h} width={w}"
    )


@dataclass(frozen=True)
class CameraRecord:
    view: int
    elevation: float
    azimuth: float
    radius: float
    pose: CameraPose
    intrinsics: Intrinsics


def parse_camera(line: str) -> CameraRecord:
    fields_ = dict(tok.split("=", 1) for tok in line.split())
    missing = [f for f in CAMERA_FIELDS if f not in fields_]
    if missing:
        raise ValueError(f"camera record lacks {missing}")
    vec = lambda s: np.array([float(x) for x in s.split(",")])
    pose = CameraPose(vec(fields_["R"]).reshape(3, 3), vec(fields_["T"]))
    intr = Intrinsics(
        float(fields_["focal"]),
        (float(fields_["cx"]), float(fields_["cy"])),
        (int(fields_["height"]), int(fields_["width"])),
    )
    return CameraRecord(
        int(fields_["view"]), float(fields_["elevation"]), float(fields_["azimuth"]), float(fields_["radius"]), pose, intr
    )


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _write_scene(manifest: DatasetManifest, index: int, root: Path) -> None:
    spec = generate_scene(manifest.scene_seed(index))
    out = root / scene_id(index)
    out.mkdir(parents=True, exist_ok=True)
    intr = Intrinsics.from_fov((manifest.resolution, manifest.resolution), manifest.fov_deg)
    lines = []
    for k, (elev, azim) in enumerate(manifest.scene_cameras(index)):
        pose = CameraPose.from_spherical(elev, azim, manifest.radius)
        img = raycast_render(spec, pose, intr, manifest.light, supersample=manifest.supersample)
        Image.fromarray(to_uint8(img), mode="RGB").save(out / f"view_{k}.png")
        lines.append(format_camera(k, elev, azim, manifest.radius, pose, intr))
    (out / "cameras.txt").write_text("\n".join(lines) + "\n")
    (out / "scene.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")


def build_dataset(manifest: DatasetManifest, output_dir, workers: int = 1) -> Path:
    """Render every scene of ``manifest`` under ``output_dir``; scenes are independent."""
    root = Path(output_dir)
    root.mkdir(parents=True, exist_ok=True)
    if not os.access(root, os.W_OK):
        raise PermissionError(f"cannot write to {root}")
    indices = range(manifest.num_scenes)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(lambda i: _write_scene(manifest, i, root), indices))
    else:
        for i in indices:
            _write_scene(manifest, i, root)
    (root / "manifest.txt").write_text(manifest.to_text())
    return root


@dataclass
class SceneData:
    scene_id: str
    images: np.ndarray  # (K, H, W, 3) float64 in [0, 1]
    cameras: list[CameraRecord]
    spec: SceneSpec

    @property
    def poses(self) -> list[CameraPose]:
        return [c.pose for c in self.cameras]


def load_scene(path) -> SceneData:
    path = Path(path)
    cams = [parse_camera(l) for l in (path / "cameras.txt").read_text().splitlines() if l.strip()]
    cams.sort(key=lambda c: c.view)
    images = np.stack(
        [np.asarray(Image.open(path / f"view_{c.view}.png").convert("RGB"), dtype=np.float64) / 255.0 for c in cams]
    )
    spec = SceneSpec.from_dict(json.loads((path / "scene.json").read_text()))
    return SceneData(path.name, images, cams, spec)


def load_dataset(root, scenes: Optional[Sequence[int]] = None) -> tuple[DatasetManifest, list[SceneData]]:
    root = Path(root)
    mpath = root / "manifest.txt"
    if not mpath.is_file():
        raise FileNotFoundError(f"no dataset manifest at {mpath}")
    manifest = DatasetManifest.from_text(mpath.read_text())
    indices = range(manifest.num_scenes) if scenes is None else scenes
    return manifest, [load_scene(root / scene_id(i)) for i in indices]
