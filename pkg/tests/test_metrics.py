import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from llvd import tensor as T
from llvd.gradcheck import check_gradients
from llvd.metrics import (
    LossWeights,
    SsimParams,
    composite_loss,
    gaussian_window,
    psnr,
    psnr_per_frame,
    ssim,
    ssim_per_frame,
)


def scalar_ssim(mu_a, mu_b, var_a=0.0, var_b=0.0, cov=0.0, k1=0.01, k2=0.03, peak=1.0):
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


# --------------------------------------------------------------------- PSNR


def test_psnr_identical_is_inf(rng):
    x = rng.random((3, 8, 8))
    assert psnr(x, x) == math.inf


def test_psnr_uniform_offset_is_twenty_db():
    assert psnr(np.full((3, 16, 16), 0.6), np.full((3, 16, 16), 0.5)) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_direct_formula(rng):
    a, b = rng.random((2, 3, 20, 20))
    direct = 10 * math.log10(1.0 / np.mean((a.astype(np.float64) - b) ** 2))
    assert abs(psnr(a, b) - direct) < 1e-9


def test_psnr_peak_scaling(rng):
    a, b = rng.random((2, 4, 4))
    assert psnr(255 * a, 255 * b, peak=255) == pytest.approx(psnr(a, b), abs=1e-9)


def test_psnr_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        psnr(np.zeros(2), np.zeros(2), peak=0)


def test_psnr_decreases_with_noise():
    x = np.random.default_rng(0).random((3, 32, 32))
    for seed in range(5):
        n = np.random.default_rng(seed).standard_normal(x.shape)
        vals = [psnr(x + s * n, x) for s in (0.01, 0.02, 0.05, 0.1, 0.2)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


def test_psnr_per_frame(rng):
    a, b = rng.random((2, 4, 3, 8, 8))
    per = psnr_per_frame(a, b)
    assert len(per) == 4 and per[2] == pytest.approx(psnr(a[2], b[2]), abs=1e-12)


# --------------------------------------------------------------------- SSIM


def test_gaussian_window_normalised():
    w = gaussian_window(11, 1.5)
    assert w.shape == (11, 11)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert w[5, 5] == w.max()


def test_ssim_self_is_exactly_one(rng):
    x = rng.random((3, 16, 16))
    assert ssim(x, x) == 1.0


def test_ssim_constant_images_closed_form():
    a, b = np.full((3, 16, 16), 0.5), np.full((3, 16, 16), 0.6)
    expected = scalar_ssim(0.5, 0.6)
    assert expected == pytest.approx(0.60010 / 0.61010, abs=1e-12)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-9)


@given(seed=st.integers(0, 10_000))
def test_ssim_symmetric(seed):
    a, b = np.random.default_rng(seed).random((2, 3, 12, 12))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


@given(seed=st.integers(0, 10_000))
def test_ssim_bounded(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((2, 2, 12, 12))
    assert -1.0 <= ssim(a, 1 - b) <= ssim(a, a) == 1.0


@given(seed=st.integers(0, 10_000))
def test_ssim_shift_invariance_on_close_pairs(seed):
    # the luminance term only cancels to second order in the local-mean gap,
    # so the 1e-6 tolerance is checked on near-identical mid-range pairs
    r = np.random.default_rng(seed)
    a = 0.4 + 0.2 * r.random((3, 24, 24))
    b = a + 1e-3 * r.standard_normal(a.shape)
    assert abs(ssim(a + 0.1, b + 0.1) - ssim(a, b)) < 1e-6


def test_ssim_window_too_large():
    with pytest.raises(ValueError):
        ssim(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))


def test_ssim_params_validation():
    with pytest.raises(ValueError):
        SsimParams(window_size=10)
    with pytest.raises(ValueError):
        SsimParams(peak=0)


def test_ssim_tensor_input_returns_tensor(rng):
    a = T.Tensor(rng.random((1, 3, 12, 12)))
    out = ssim(a, a)
    assert isinstance(out, T.Tensor)
    assert out.item() == pytest.approx(1.0, abs=1e-6)


def test_ssim_per_frame(rng):
    a, b = rng.random((2, 3, 1, 12, 12))
    vals = ssim_per_frame(a, b)
    assert len(vals) == 3 and vals[1] == pytest.approx(ssim(a[1], b[1]), abs=1e-12)


# --------------------------------------------------------------------- loss


def test_default_weights():
    assert LossWeights() == LossWeights(0.1, 0.01)
    with pytest.raises(ValueError):
        LossWeights(-1.0, 0.0)


def test_loss_zero_at_equality(rng):
    x = [T.Tensor(rng.random((1, 3, 16, 16))) for _ in range(3)]
    assert composite_loss(x, x).item() == 0.0


def test_loss_single_pixel_hand_value():
    loss = composite_loss([T.Tensor(np.full((1, 1, 1, 1), 0.6), dtype=np.float64)],
                          [T.Tensor(np.full((1, 1, 1, 1), 0.5), dtype=np.float64)], LossWeights(0.1, 0.0))
    assert loss.item() == pytest.approx(0.02, abs=1e-12)


def test_loss_matches_direct_formula(rng):
    p, g = rng.random((2, 2, 1, 3, 16, 16))
    loss = composite_loss([T.Tensor(f, dtype=np.float64) for f in p], [T.Tensor(f, dtype=np.float64) for f in g])
    direct = np.mean((p - g) ** 2) + 0.1 * np.mean(np.abs(p - g)) + 0.01 * (1 - np.mean([ssim(a, b) for a, b in zip(p, g)]))
    assert loss.item() == pytest.approx(direct, rel=1e-9)


def test_loss_length_mismatch(rng):
    x = [T.Tensor(rng.random((1, 1, 12, 12)))]
    with pytest.raises(ValueError):
        composite_loss(x, x + x)


@given(seed=st.integers(0, 10_000))
def test_loss_non_negative_and_zero_only_at_equality(seed):
    r = np.random.default_rng(seed)
    p, g = r.random((2, 1, 2, 12, 12))
    loss = composite_loss([T.Tensor(p)], [T.Tensor(g)]).item()
    assert loss > 0


def test_loss_gradient_matches_finite_differences(rng):
    gt = [T.Tensor(rng.random((1, 2, 12, 12)), dtype=np.float64) for _ in range(2)]
    arrays = [rng.random((1, 2, 12, 12)) for _ in range(2)]
    fn = lambda a, b: composite_loss([a, b], gt)
    assert check_gradients(fn, arrays, eps=1e-6, max_entries=40) < 1e-3


def test_ssim_gradient_matches_finite_differences(rng):
    b = T.Tensor(rng.random((1, 1, 13, 13)), dtype=np.float64)
    assert check_gradients(lambda a: ssim(a, b), [rng.random((1, 1, 13, 13))], eps=1e-6) < 1e-4
