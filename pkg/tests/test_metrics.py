import numpy as np
import pytest
from skimage.metrics import structural_similarity

from volavatar.metrics import SizeMismatchError, metric_l1, metric_psnr, metric_ssim, ssim_map


def test_identical(rng):
    a = rng.uniform(size=(32, 32, 3))
    assert metric_l1(a, a) == 0 and metric_psnr(a, a) == float("inf") and metric_ssim(a, a) == pytest.approx(1.0)


def test_psnr_formula():
    assert metric_psnr(np.zeros((8, 8, 3)), np.full((8, 8, 3), 0.1)) == pytest.approx(20.0)


def test_ssim_symmetric(rng):
    a, b = rng.uniform(size=(2, 24, 24, 3))
    assert metric_ssim(a, b) == pytest.approx(metric_ssim(b, a), rel=1e-12)


def test_ssim_matches_skimage(rng):
    a = rng.uniform(size=(40, 40, 3))
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    _, full = structural_similarity(a, b, channel_axis=2, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, data_range=1.0, full=True)
    np.testing.assert_allclose(ssim_map(a, b), full.mean(axis=2), atol=1e-10)
    ref = structural_similarity(a, b, channel_axis=2, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                data_range=1.0)
    assert metric_ssim(a, b) == pytest.approx(ref, abs=1e-10)


def test_masked_metrics(rng):
    a = rng.uniform(size=(16, 16, 3))
    b = a.copy()
    b[:8] += 0.2
    mask = np.zeros((16, 16))
    mask[8:] = 1
    assert metric_l1(a, b, mask) == 0 and metric_psnr(a, b, mask) == float("inf")
    assert metric_l1(a, b) == pytest.approx(0.1)


def test_size_mismatch():
    with pytest.raises(SizeMismatchError):
        metric_l1(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))
    with pytest.raises(SizeMismatchError):
        metric_psnr(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.zeros((3, 3)))
