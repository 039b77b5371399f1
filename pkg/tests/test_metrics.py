import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from memdiff.metrics import batch_psnr, batch_ssim, psnr, ssim


def brute_psnr(a, b):
    total = 0.0
    for v in np.nditer([a, b]):
        total += (float(v[0]) - float(v[1])) ** 2
    mse = total / a.size
    return 100.0 if mse == 0 else min(100.0, 10 * math.log10(1.0 / mse))


def brute_ssim(a, b, win=11, sigma=1.5):
    """Direct per-window loop: weighted means and unbiased covariances on luma."""
    wts = [0.299, 0.587, 0.114]
    x = sum(a[..., c] * wts[c] for c in range(3))
    y = sum(b[..., c] * wts[c] for c in range(3))
    g1 = [math.exp(-((i - (win - 1) / 2) ** 2) / (2 * sigma ** 2)) for i in range(win)]
    s1 = sum(g1)
    g = [[g1[i] * g1[j] / (s1 * s1) for j in range(win)] for i in range(win)]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    n = win * win
    vals = []
    H, W = x.shape
    for r in range(H - win + 1):
        for c in range(W - win + 1):
            mx = my = sxx = syy = sxy = 0.0
            for i in range(win):
                for j in range(win):
                    xv, yv, w = x[r + i, c + j], y[r + i, c + j], g[i][j]
                    mx += w * xv
                    my += w * yv
                    sxx += w * xv * xv
                    syy += w * yv * yv
                    sxy += w * xv * yv
            k = n / (n - 1)
            vx, vy, cxy = k * (sxx - mx * mx), k * (syy - my * my), k * (sxy - mx * my)
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def pairs(n, size=16, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        a = rng.random((size, size, 3))
        b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.3), a.shape), 0, 1)
        yield a, b


def test_psnr_matches_brute_force():
    for a, b in pairs(20):
        assert abs(psnr(a, b) - brute_psnr(a, b)) <= 1e-6


def test_ssim_matches_brute_force():
    for a, b in pairs(20, size=14, seed=1):
        assert abs(ssim(a, b) - brute_ssim(a, b)) <= 1e-6


def test_ssim_matches_skimage():
    skm = pytest.importorskip("skimage.metrics")
    for a, b in pairs(3, size=32, seed=2):
        ga, gb = a @ [0.299, 0.587, 0.114], b @ [0.299, 0.587, 0.114]
        ref = skm.structural_similarity(ga, gb, gaussian_weights=True, sigma=1.5, use_sample_covariance=True,
                                        data_range=1.0)
        # skimage averages over the valid region too (it crops (win-1)/2 pixels)
        assert abs(ssim(a, b) - ref) <= 1e-6


def test_fixed_examples():
    black, white = np.zeros((32, 32, 3)), np.ones((32, 32, 3))
    assert psnr(black, white) == pytest.approx(0.0, abs=1e-12)
    half = np.full((32, 32, 3), 0.25)
    assert psnr(black, half) == pytest.approx(12.0412, abs=1e-4)
    img = np.random.default_rng(0).random((32, 32, 3))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)
    assert psnr(img, img) == 100.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_batch_versions():
    a = np.random.default_rng(0).random((2, 3, 16, 16, 3))
    b = np.clip(a + 0.1, 0, 1)
    bp, bs = batch_psnr(a, b), batch_ssim(a, b)
    assert bp.shape == (6,) and bs.shape == (6,)
    assert bp[4] == pytest.approx(psnr(a[1, 1], b[1, 1]))
    assert bs[5] == pytest.approx(ssim(a[1, 2], b[1, 2]))


unit_img = arrays(np.float64, (12, 12, 3), elements=st.floats(0, 1))


@settings(max_examples=30, deadline=None)
@given(unit_img, unit_img)
def test_symmetry_and_bounds(a, b):
    assert psnr(a, b) == pytest.approx(psnr(b, a))
    assert psnr(a, b) >= 0
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 - 1e-9 <= s <= 1 + 1e-9
