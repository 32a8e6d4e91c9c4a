import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from loomweave.geometry import CameraPose, Intrinsics, intersect_cube, make_rays, sample_along_ray
from loomweave.rendering import (
    RenderParams,
    Triplane,
    correct_ray_feature,
    render_feature_map,
    sample_planes,
    sample_triplane,
)
from loomweave.splatting import ORIENTATIONS

SIDE = 1.5
KEEP = {"XY": (0, 1), "YZ": (1, 2), "XZ": (0, 2)}


def oracle_sample(planes, p, side=SIDE):
    """Clamped bilinear lookup on each plane, summed."""
    total = 0
    for o, grid in planes.items():
        h, w = grid.shape[:2]
        a, b = KEEP[o.value if hasattr(o, "value") else o]
        u = np.clip((p[a] + side / 2) / side * h - 0.5, 0, h - 1)
        v = np.clip((p[b] + side / 2) / side * w - 0.5, 0, w - 1)
        i0, j0 = int(np.floor(u)), int(np.floor(v))
        i1, j1 = min(i0 + 1, h - 1), min(j0 + 1, w - 1)
        fu, fv = u - i0, v - j0
        total = total + (
            (1 - fu) * (1 - fv) * grid[i0, j0] + fu * (1 - fv) * grid[i1, j0] + (1 - fu) * fv * grid[i0, j1] + fu * fv * grid[i1, j1]
        )
    return total


def random_triplane(shape=(4, 4), c=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    return Triplane({o: torch.randn(*shape, c, generator=g, dtype=torch.float64) for o in ORIENTATIONS})


def tiny_params(seed=0, importance_zero=False):
    torch.manual_seed(seed)
    p = RenderParams(2, 2, hidden=4, depth=1).double()
    if importance_zero:
        with torch.no_grad():
            p.importance.weight.zero_()
            p.importance.bias.zero_()
    return p


def test_constant_planes_sum():
    tri = Triplane({o: torch.full((4, 4, 2), v, dtype=torch.float64) for o, v in zip(ORIENTATIONS, (1.0, -2.0, 0.25))})
    rng = np.random.default_rng(0)
    for p in rng.uniform(-SIDE / 2, SIDE / 2, (20, 3)):
        np.testing.assert_allclose(sample_triplane(tri, p, SIDE).numpy(), [-0.75, -0.75], atol=1e-12)


def test_grid_center_triple():
    tri = random_triplane(shape=(8, 8))
    centers = lambda i: ((i + 0.5) / 8 - 0.5) * SIDE
    x, y, z = centers(1), centers(6), centers(3)
    expected = tri["XY"][1, 6] + tri["YZ"][6, 3] + tri["XZ"][1, 3]
    assert torch.allclose(sample_triplane(tri, [x, y, z], SIDE), expected, atol=1e-12)


def test_outside_cube_rejected():
    with pytest.raises(ValueError):
        sample_triplane(random_triplane(), [0, 0, 0.9], SIDE)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-SIDE / 2, SIDE / 2), min_size=3, max_size=3))
def test_sampling_matches_oracle(p):
    tri = random_triplane(shape=(5, 3), seed=1)
    ref = oracle_sample({o: tri[o].numpy() for o in ORIENTATIONS}, np.array(p))
    np.testing.assert_allclose(sample_triplane(tri, p, SIDE).numpy(), ref, atol=1e-12)


def test_shared_space_consistency_across_cameras():
    tri = random_triplane(shape=(8, 8), seed=2)
    # axis-aligned rays from two cameras meeting at an exactly representable point
    ray_a = (np.array([2.0, 0.25, 0.5]), np.array([-1.0, 0.0, 0.0]), 1.75)
    ray_b = (np.array([0.25, -2.0, 0.5]), np.array([0.0, 1.0, 0.0]), 2.25)
    feats = [sample_triplane(tri, o + t * d, SIDE) for o, d, t in (ray_a, ray_b)]
    assert torch.equal(feats[0], feats[1])
    # the batched sampler agrees exactly when the same point occurs in two scenes' queries
    planes = {o: tri[o][None].expand(2, -1, -1, -1) for o in ORIENTATIONS}
    point = [0.1, -0.2, 0.05]
    pos = torch.tensor([[point, [0.3, 0.3, 0.3]], [[-0.3, 0.1, 0.2], point]], dtype=torch.float64)
    out = sample_planes(planes, pos, SIDE)
    assert torch.equal(out[0, 0], out[1, 1])


def np_mlp_softmax(params, f_p, g):
    """Hand evaluation of decoder + importance softmax with one hidden SiLU layer."""
    l1, l2 = params.decoder[0], params.decoder[2]
    W1, b1 = l1.weight.detach().numpy(), l1.bias.detach().numpy()
    W2, b2 = l2.weight.detach().numpy(), l2.bias.detach().numpy()
    wi, bi = params.importance.weight.detach().numpy()[0], params.importance.bias.detach().numpy()[0]
    outs, logits = [], []
    for gm in g:
        x = np.concatenate([f_p, gm])
        h = W1 @ x + b1
        h = h / (1 + np.exp(-h))
        y = W2 @ h + b2
        outs.append(y)
        logits.append(wi @ y + bi)
    logits = np.array(logits)
    w = np.exp(logits - logits.max())
    w /= w.sum()
    return sum(wi_ * o for wi_, o in zip(w, outs)), w


def test_tiny_decoder_oracle():
    params = tiny_params(seed=3)
    rng = np.random.default_rng(3)
    for _ in range(10):
        f_p, g = rng.normal(size=2), rng.normal(size=(3, 2))
        out, w = correct_ray_feature(params, torch.tensor(f_p), torch.tensor(g), return_weights=True)
        ref, ref_w = np_mlp_softmax(params, f_p, g)
        np.testing.assert_allclose(out.detach().numpy(), ref, atol=1e-6)
        np.testing.assert_allclose(w.detach().numpy(), ref_w, atol=1e-6)


def test_single_sample_is_decoder_output():
    params = tiny_params(seed=4)
    f_p, g = torch.randn(2, dtype=torch.float64), torch.randn(1, 2, dtype=torch.float64)
    out = correct_ray_feature(params, f_p, g)
    assert torch.equal(out, params.decoder(torch.cat([f_p, g[0]])))


def test_zero_importance_gives_mean():
    params = tiny_params(seed=5, importance_zero=True)
    f_p, g = torch.randn(2, dtype=torch.float64), torch.randn(4, 2, dtype=torch.float64)
    out, w = correct_ray_feature(params, f_p, g, return_weights=True)
    assert torch.allclose(w, torch.full((4,), 0.25, dtype=torch.float64))
    dec = params.decoder(torch.cat([f_p.expand(4, 2), g], dim=1))
    assert torch.allclose(out, dec.mean(0), atol=1e-12)


def test_empty_samples_rejected():
    with pytest.raises(ValueError):
        correct_ray_feature(tiny_params(), torch.zeros(2), torch.zeros(0, 2))


def test_weights_normalized_and_sample_permutation():
    params = RenderParams(3, 5, depth=2).double()
    g = torch.Generator().manual_seed(6)
    f_p = torch.randn(50, 3, generator=g, dtype=torch.float64)
    samples = torch.randn(50, 7, 5, generator=g, dtype=torch.float64)
    out, w = params.correct(f_p, samples, return_weights=True)
    assert ((w.sum(-1) - 1).abs() < 1e-6).all()
    assert ((w >= 0) & (w <= 1)).all()
    perm = torch.randperm(7, generator=g)
    out_p = params.correct(f_p, samples[:, perm])
    assert (out - out_p).abs().max() < 1e-6


def test_correct_gradcheck():
    params = tiny_params(seed=7)
    f_p = torch.randn(2, dtype=torch.float64, requires_grad=True)
    g = torch.randn(3, 2, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda a, b: correct_ray_feature(params, a, b), (f_p, g), eps=1e-6, atol=1e-8, rtol=1e-4)
    names = [n for n, _ in params.named_parameters()]

    def fn(*ps):
        return _correct(params, names, ps, f_p.detach(), g.detach())

    inputs = tuple(p.detach().clone().requires_grad_() for p in params.parameters())
    assert torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-8, rtol=1e-4)


def _correct(params, names, ps, f_p, g):
    from torch.func import functional_call

    class Wrapper(torch.nn.Module):
        def __init__(self, inner):
            super().__init__()
            self.inner = inner

        def forward(self, a, b):
            return self.inner.correct(a, b)

    wrapped = Wrapper(params)
    return functional_call(wrapped, {"inner." + n: p for n, p in zip(names, ps)}, (f_p, g))


def test_fused_first_layer_matches_direct():
    params = RenderParams(3, 4, depth=2).double()
    tri = random_triplane(shape=(6, 5), c=4, seed=8)
    planes = {o: tri[o][None] for o in ORIENTATIONS}
    g = torch.Generator().manual_seed(8)
    pos = (torch.rand(1, 10, 4, 3, generator=g, dtype=torch.float64) - 0.5) * SIDE
    f_p = torch.randn(1, 10, 3, generator=g, dtype=torch.float64)
    fused = params.correct_from_planes(f_p, planes, pos, SIDE)
    g_samples = sample_planes(planes, pos.reshape(1, 40, 3), SIDE).reshape(1, 10, 4, 4)
    assert torch.allclose(fused, params.correct(f_p, g_samples), atol=1e-12)


def test_render_passthrough_when_rays_miss():
    params = tiny_params(seed=9)
    tri = random_triplane(c=2)
    # camera far away looking away from the cube
    pose = CameraPose.look_at([0, 0, 5.0], target=[0, 0, 10.0], up=[0, 1, 0])
    fmap = torch.randn(3, 3, 2, dtype=torch.float64)
    out = render_feature_map(params, tri, fmap, pose, Intrinsics.from_fov((3, 3)), SIDE, 4)
    assert torch.equal(out, fmap)


def test_zero_triplane_collapse():
    params = tiny_params(seed=10, importance_zero=True)
    tri = Triplane({o: torch.zeros(4, 4, 2, dtype=torch.float64) for o in ORIENTATIONS})
    pose = CameraPose.from_spherical(30, 45, 2.0)
    intr = Intrinsics.from_fov((4, 4))
    fmap = torch.randn(4, 4, 2, dtype=torch.float64)
    out = render_feature_map(params, tri, fmap, pose, intr, SIDE, 3)
    rays = make_rays(pose, intr)
    for ray in rays:
        i, j = ray.pixel
        f = fmap[i, j]
        if intersect_cube(ray, SIDE).hit:
            expected = params.decoder(torch.cat([f, torch.zeros(2, dtype=torch.float64)]))
            assert torch.allclose(out[i, j], expected, atol=1e-12)
        else:
            assert torch.equal(out[i, j], f)


def test_render_matches_manual_composition():
    params = tiny_params(seed=11)
    tri = random_triplane(shape=(4, 4), c=2, seed=11)
    pose = CameraPose.from_spherical(20, 70, 2.0)
    intr = Intrinsics.from_fov((2, 2), fov_deg=30)
    fmap = torch.randn(2, 2, 2, dtype=torch.float64)
    out = render_feature_map(params, tri, fmap, pose, intr, SIDE, 2)
    planes_np = {o: tri[o].numpy() for o in ORIENTATIONS}
    covered = 0
    for ray in make_rays(pose, intr):
        i, j = ray.pixel
        hit = intersect_cube(ray, SIDE)
        if not hit.hit:
            assert torch.equal(out[i, j], fmap[i, j])
            continue
        covered += 1
        g = np.stack([oracle_sample(planes_np, np.clip(s.position, -SIDE / 2, SIDE / 2)) for s in sample_along_ray(ray, hit, 2)])
        ref, _ = np_mlp_softmax(params, fmap[i, j].numpy(), g)
        np.testing.assert_allclose(out[i, j].detach().numpy(), ref, atol=1e-9)
    assert covered == 4
