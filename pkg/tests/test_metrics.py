import math

import numpy as np
import pytest

from flowrecon.metrics import data_range, gaussian_window, psnr, ssim, ssim_map, summarize


def test_psnr_twenty_db():
    ref = np.linspace(0, 1, 64).reshape(8, 8)
    est = ref + 0.1
    assert psnr(est, ref, range_mode=1.0) == pytest.approx(20.0, abs=1e-12)
    assert psnr(est, ref) == pytest.approx(20.0, abs=1e-12)  # min-max range is also 1


def test_psnr_identical_is_infinite(rng):
    x = rng.uniform(size=(4, 4))
    assert psnr(x, x) == math.inf


def test_psnr_range_modes(rng):
    ref = rng.uniform(0.2, 0.6, size=(16, 16))
    est = ref + rng.normal(0, 0.01, ref.shape)
    mse = np.mean((est - ref) ** 2)
    assert psnr(est, ref, "max") == pytest.approx(10 * np.log10(ref.max() ** 2 / mse))
    assert psnr(est, ref) == pytest.approx(10 * np.log10(np.ptp(ref) ** 2 / mse))
    assert data_range(ref, 2.5) == 2.5
    with pytest.raises(ValueError):
        data_range(ref, "median")


def test_gaussian_window():
    w = gaussian_window()
    assert len(w) == 11 and w.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(w, w[::-1])
    assert w[5] / w[6] == pytest.approx(math.exp(1 / (2 * 1.5 ** 2)))


def test_ssim_of_identical_images(rng):
    x = rng.uniform(size=(32, 24))
    assert abs(ssim(x, x) - 1.0) <= 1e-9


def test_ssim_negative_for_inverted_image():
    # a checkerboard has (numerically) zero local means, so only the structure term
    # is left and it flips sign under negation
    x = np.indices((16, 16)).sum(axis=0) % 2 * 2.0 - 1.0
    assert ssim(-x, x) < -0.99


def test_single_window_matches_direct_formula(rng):
    a, b = rng.uniform(size=(2, 11, 11))
    w1 = gaussian_window(11, 1.5)
    w = np.outer(w1, w1)
    L = np.ptp(b)
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    mu_a, mu_b = np.sum(w * a), np.sum(w * b)
    var_a = np.sum(w * (a - mu_a) ** 2)
    var_b = np.sum(w * (b - mu_b) ** 2)
    cov = np.sum(w * (a - mu_a) * (b - mu_b))
    direct = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)
              / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    assert ssim_map(a, b).shape == (1, 1)
    assert ssim(a, b) == pytest.approx(direct, abs=1e-10)


def test_ssim_matches_scikit_image(rng):
    metrics = pytest.importorskip("skimage.metrics")
    a = rng.uniform(size=(40, 32))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ref = metrics.structural_similarity(a, b, data_range=np.ptp(b), gaussian_weights=True,
                                        sigma=1.5, use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_summarize():
    assert summarize([1.0, 3.0]) == (2.0, 1.0)
    assert summarize([math.inf, math.inf]) == (math.inf, 0.0)
