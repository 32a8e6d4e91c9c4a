import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from loomweave.metrics import IDENTICAL, format_psnr, psnr, ssim


def ssim_oracle(a, b):
    """Window-by-window transcription: Gaussian-weighted means, variances and covariance."""
    x = np.arange(11) - 5
    g1 = np.exp(-(x**2) / (2 * 1.5**2))
    w = np.outer(g1, g1)
    w /= w.sum()
    c1, c2 = 0.01**2, 0.03**2
    per_channel = []
    for ch in range(a.shape[2]):
        vals = []
        for i in range(a.shape[0] - 10):
            for j in range(a.shape[1] - 10):
                pa, pb = a[i : i + 11, j : j + 11, ch], b[i : i + 11, j : j + 11, ch]
                mu_a, mu_b = (w * pa).sum(), (w * pb).sum()
                var_a = (w * (pa - mu_a) ** 2).sum()
                var_b = (w * (pb - mu_b) ** 2).sum()
                cov = (w * (pa - mu_a) * (pb - mu_b)).sum()
                vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)))
        per_channel.append(np.mean(vals))
    return float(np.mean(per_channel))


def test_psnr_examples():
    a = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert psnr(a, a) == IDENTICAL
    assert format_psnr(psnr(a, a)) == "identical"
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_psnr_elementwise_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = rng.uniform(size=(2, 7, 9, 3))
        total = 0.0
        for u, v in zip(a.ravel(), b.ravel()):
            total += (u - v) ** 2
        ref = 10 * math.log10(1 / (total / a.size))
        assert abs(psnr(a, b) - ref) < 1e-9


def test_ssim_examples():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(16, 16, 3))
    assert abs(ssim(a, a) - 1.0) < 1e-9
    # binary image has no mid-grey; its negative is perfectly anticorrelated
    binary = (rng.uniform(size=(16, 16)) > 0.5).astype(float)
    assert ssim(binary, 1 - binary) < 0
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 16)), np.zeros((10, 16)))
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))


def test_ssim_formula_oracle_16x16():
    rng = np.random.default_rng(3)
    a = rng.uniform(size=(16, 16, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert abs(ssim(a, b) - ssim_oracle(a, b)) < 1e-6
    c = rng.uniform(size=(13, 17, 1))
    d = rng.uniform(size=(13, 17, 1))
    assert abs(ssim(c[..., 0], d[..., 0]) - ssim_oracle(c, d)) < 1e-6


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (12, 12, 2), elements=st.floats(0, 1)), arrays(np.float64, (12, 12, 2), elements=st.floats(0, 1)))
def test_ssim_bounds_and_symmetry(a, b):
    s = ssim(a, b)
    assert -1 - 1e-9 <= s <= 1 + 1e-9
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
