import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from loomweave.geometry import (
    CameraPose,
    CubeHit,
    HarmonicConfig,
    Intrinsics,
    Ray,
    build_point_features,
    harmonic_embed,
    intersect_cube,
    make_rays,
    plucker_encode,
    sample_along_ray,
)


def march_cube(origin, direction, side, step=1e-4):
    """Walk the ray in fixed steps and report the first/last in-cube step.

    The walk covers only the stretch inside the cube's circumscribed sphere.
    """
    r = side * np.sqrt(3) / 2
    tc = -float(origin @ direction)
    closest = origin + tc * direction
    if closest @ closest > r * r:
        return None
    half = np.sqrt(r * r - closest @ closest)
    t = np.arange(max(0.0, np.floor((tc - half) / step) * step), tc + half + step, step)
    pts = origin[None] + t[:, None] * direction[None]
    inside = np.all(np.abs(pts) <= side / 2, axis=1)
    if not inside.any():
        return None
    idx = np.flatnonzero(inside)
    return t[idx[0]], t[idx[-1]]


def pinhole_direction(pose, focal, cx, cy, row, col):
    # camera frame: x right, y up, looking down -z
    d_cam = np.array([(col - cx) / focal, (cy - row) / focal, -1.0])
    d = pose.rotation.T @ d_cam
    return d / np.linalg.norm(d)


def test_pose_validation():
    with pytest.raises(ValueError):
        CameraPose(np.diag([1.0, 1.0, 2.0]), np.zeros(3))
    with pytest.raises(ValueError):
        CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_optical_axis_ray():
    pose = CameraPose(np.eye(3), np.array([0.0, 0.0, -2.0]))  # center (0, 0, 2)
    intr = Intrinsics(8.0, (3.0, 3.0), (7, 7))
    rays = make_rays(pose, intr)
    principal = rays[3 * 7 + 3]
    np.testing.assert_allclose(principal.origin, [0, 0, 2])
    np.testing.assert_allclose(principal.direction, [0, 0, -1], atol=1e-15)


def test_ray_count_and_unit_norm():
    pose = CameraPose.from_spherical(20.0, 75.0, 2.0)
    rays = make_rays(pose, Intrinsics.from_fov((8, 8)))
    assert len(rays) == 64
    for r in rays:
        assert abs(np.linalg.norm(r.direction) - 1) < 1e-9
        np.testing.assert_allclose(r.origin, pose.center, atol=1e-12)
    assert rays[9].pixel == (1, 1)


def test_pixel_right_of_principal_matches_pinhole():
    pose = CameraPose(np.eye(3), np.array([0.0, 0.0, -2.0]))
    intr = Intrinsics(8.0, (3.0, 3.0), (7, 7))
    ray = make_rays(pose, intr)[3 * 7 + 4]
    expected = np.array([1 / 8, 0, -1]) / np.linalg.norm([1 / 8, 0, -1])
    np.testing.assert_allclose(ray.direction, expected, atol=1e-12)


def test_rays_match_pinhole_oracle_for_rotated_camera():
    pose = CameraPose.from_spherical(35.0, 210.0, 2.3)
    intr = Intrinsics(5.5, (2.2, 1.7), (4, 5))
    rays = make_rays(pose, intr)
    for r in rays:
        row, col = r.pixel
        np.testing.assert_allclose(r.direction, pinhole_direction(pose, 5.5, 2.2, 1.7, row, col), atol=1e-12)


def test_look_at_points_at_target():
    pose = CameraPose.from_spherical(30.0, 45.0, 2.0)
    center_ray = pinhole_direction(pose, 1.0, 0.0, 0.0, 0, 0)
    np.testing.assert_allclose(center_ray, -pose.center / 2.0, atol=1e-12)
    e, a, r = pose.spherical()
    assert (e, a, r) == pytest.approx((30.0, 45.0, 2.0))


def test_intersect_examples():
    h = intersect_cube(Ray([0, 0, 2], [0, 0, -1]), 1.5)
    assert h.hit and h.t_near == pytest.approx(1.25) and h.t_far == pytest.approx(2.75)
    assert not intersect_cube(Ray([5, 5, 5], [0, 0, -1]), 1.5).hit
    h = intersect_cube(Ray([0, 0, 0], [1, 0, 0]), 1.5)
    assert h.hit and h.t_near == 0.0 and h.t_far == pytest.approx(0.75)


def test_intersect_matches_marching_oracle():
    rng = np.random.default_rng(7)
    side = 1.5
    for _ in range(1000):
        origin = rng.uniform(-3, 3, 3)
        # aim near the cube so that most rays hit
        target = rng.uniform(-1.2, 1.2, 3)
        d = target - origin
        ray = Ray(origin, d)
        hit = intersect_cube(ray, side)
        ref = march_cube(ray.origin, ray.direction, side)
        if ref is None:
            assert not hit.hit or hit.t_far - hit.t_near < 2e-4
            continue
        # a graze shorter than the step may still be caught by the slab method
        assert hit.hit
        assert abs(hit.t_near - ref[0]) < 2e-4
        assert abs(hit.t_far - ref[1]) < 2e-4


def test_sample_along_ray_midpoints():
    ray = Ray([0, 0, 2], [0, 0, -1])
    hit = intersect_cube(ray, 1.5)
    samples = sample_along_ray(ray, hit, 16)
    assert len(samples) == 16
    assert samples[0].depth == pytest.approx(1.296875)
    assert samples[-1].depth == pytest.approx(2.703125)
    one = sample_along_ray(ray, hit, 1)
    assert one[0].depth == pytest.approx(2.0)
    with pytest.raises(ValueError):
        sample_along_ray(ray, hit, 0)
    assert sample_along_ray(Ray([5, 5, 5], [0, 0, -1]), CubeHit(0.0, 0.0, False), 4) == []


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-3, 3), min_size=3, max_size=3),
    st.lists(st.floats(-1, 1), min_size=3, max_size=3),
    st.integers(1, 20),
)
def test_samples_increase_and_stay_inside(origin, target, m):
    d = np.array(target) - np.array(origin)
    if np.linalg.norm(d) < 1e-3:
        return
    ray = Ray(origin, d)
    hit = intersect_cube(ray, 1.5)
    if not hit.hit:
        return
    samples = sample_along_ray(ray, hit, m)
    depths = [s.depth for s in samples]
    assert all(b > a for a, b in zip(depths, depths[1:]))
    for s in samples:
        assert np.all(np.abs(s.position) <= 0.75 + 1e-9)
        assert hit.t_near <= s.depth <= hit.t_far


def test_plucker_examples():
    np.testing.assert_allclose(plucker_encode(Ray([0, 0, 2], [0, 0, -1])), [0, 0, -1, 0, 0, 0], atol=0)
    np.testing.assert_allclose(plucker_encode(Ray([1, 0, 0], [0, 1, 0])), [0, 1, 0, 0, 0, 1], atol=0)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-2, 2), min_size=3, max_size=3),
    st.lists(st.floats(-1, 1), min_size=3, max_size=3),
    st.floats(-5, 5),
)
def test_plucker_translation_invariance(origin, direction, shift):
    if np.linalg.norm(direction) < 1e-3:
        return
    ray = Ray(origin, direction)
    moved = Ray(ray.origin + shift * ray.direction, ray.direction)
    assert np.max(np.abs(plucker_encode(ray) - plucker_encode(moved))) < 1e-9


def test_harmonic_examples():
    np.testing.assert_allclose(harmonic_embed(0.0, HarmonicConfig(2, True)), [0, 0, 0, 1, 1])
    assert harmonic_embed(np.zeros(6), HarmonicConfig(4)).shape == (48,)
    out = harmonic_embed(math.pi / 2, HarmonicConfig(1))
    assert out[0] == pytest.approx(1.0)
    assert abs(out[1]) < 1e-12
    with pytest.raises(ValueError):
        HarmonicConfig(0)
    # frequency ordering: sin block then cos block, frequencies 2^0..2^(F-1)
    x = np.array([0.3, -1.1])
    expected = [math.sin(f * v) for v in x for f in (1, 2, 4)] + [math.cos(f * v) for v in x for f in (1, 2, 4)]
    np.testing.assert_allclose(harmonic_embed(x, HarmonicConfig(3)), expected, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=8), st.integers(1, 6))
def test_harmonic_norm_identity(x, f):
    out = harmonic_embed(np.array(x), HarmonicConfig(f))
    assert abs(float(np.sum(out**2)) - len(x) * f) < 1e-9


def test_point_features_layout():
    ray = Ray([0.3, -2.0, 0.5], [0.1, 1.0, -0.2])
    hit = intersect_cube(ray, 1.5)
    samples = sample_along_ray(ray, hit, 3)
    pix = np.array([1.0, 2.0, 3.0, 4.0])
    out = build_point_features(samples, pix, plucker_encode(ray), HarmonicConfig(4))
    assert all(len(s.feature) == 60 for s in out)
    np.testing.assert_array_equal(out[0].feature[: 4 + 48], out[2].feature[: 4 + 48])
    np.testing.assert_array_equal(out[0].feature[:4], pix)
    np.testing.assert_allclose(out[1].feature[52:], harmonic_embed(samples[1].depth, HarmonicConfig(4)))
    with pytest.raises(ValueError):
        build_point_features(samples, pix, np.zeros(5))
    with pytest.raises(ValueError):
        build_point_features([], pix, np.zeros(6))


def test_point_features_zero_pattern():
    from loomweave.geometry import RaySample

    s = [RaySample(np.zeros(3), 0.0)]
    out = build_point_features(s, np.zeros(2), plucker_encode(Ray([0, 0, 2], [0, 0, -1])), HarmonicConfig(4))
    f = out[0].feature
    np.testing.assert_array_equal(f[:2], 0)
    depth_block = f[-8:]
    np.testing.assert_allclose(depth_block, [0, 0, 0, 0, 1, 1, 1, 1])


def test_intrinsics_rescale_keeps_pixel_edges():
    intr = Intrinsics.from_fov((32, 32))
    small = intr.rescaled((8, 8))
    assert small.focal == pytest.approx(intr.focal / 4)
    assert small.principal_point == pytest.approx((3.5, 3.5))
    assert Intrinsics.from_fov((8, 8)).focal == pytest.approx(small.focal)
