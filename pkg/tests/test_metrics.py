import math

import numpy as np
import pytest

from petdiff.models import Volume
from petdiff.utils.metrics import MetricError, PSNR_CAP_DB, gaussian_window, psnr, ssim


@pytest.fixture
def random_pair():
    """Two fixed-seed random 16^3 volumes"""
    rng = np.random.default_rng(7)
    return rng.random((1, 16, 16, 16)), rng.random((1, 16, 16, 16))


def _windowed_ssim_oracle(x, y, peak, size=7, sigma=1.5):
    """Straightforward loop over every window position"""
    coords = np.arange(size) - (size - 1) / 2
    g = np.exp(-coords ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    w = g[:, None, None] * g[None, :, None] * g[None, None, :]
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    values = []
    n = x.shape[0] - size + 1
    for i in range(n):
        for j in range(n):
            for k in range(n):
                px = x[i:i + size, j:j + size, k:k + size]
                py = y[i:i + size, j:j + size, k:k + size]
                mx, my = (w * px).sum(), (w * py).sum()
                vx = (w * px * px).sum() - mx ** 2
                vy = (w * py * py).sum() - my ** 2
                cov = (w * px * py).sum() - mx * my
                values.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(values))


def test_psnr_identical_is_capped():
    """Zero error scores the cap"""
    x = np.random.default_rng(0).random((1, 8, 8, 8))
    assert psnr(x, x) == PSNR_CAP_DB


def test_psnr_constant_offset():
    """An offset of 0.1 with unit range is 20 dB"""
    ref = np.random.default_rng(1).random((1, 8, 8, 8))
    assert psnr(ref + 0.1, ref, data_range=1.0) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_oracle(random_pair):
    """Agrees with a one-line MSE/log formula"""
    pred, ref = random_pair
    expected = 10 * math.log10((ref.max() - ref.min()) ** 2 / np.mean((pred - ref) ** 2))
    assert psnr(Volume(pred), Volume(ref)) == pytest.approx(expected, abs=1e-4)
    assert psnr(pred, ref) == pytest.approx(expected, abs=1e-6)


def test_psnr_symmetric_and_shift_invariant(random_pair):
    """Test PSNR under swapping and common shifts"""
    pred, ref = random_pair
    assert psnr(pred, ref, data_range=1.0) == pytest.approx(psnr(ref, pred, data_range=1.0))
    assert psnr(pred + 3.0, ref + 3.0) == pytest.approx(psnr(pred, ref), abs=1e-9)


def test_psnr_decreases_with_noise():
    """Test more noise gives lower PSNR"""
    rng = np.random.default_rng(3)
    ref = rng.random((1, 16, 16, 16))
    noise = rng.standard_normal(ref.shape)
    scores = [psnr(ref + a * noise, ref) for a in (0.01, 0.1, 1.0)]
    assert scores[0] > scores[1] > scores[2]


def test_psnr_errors():
    """Test shape mismatch and bad ranges are rejected"""
    with pytest.raises(MetricError):
        psnr(np.zeros((1, 8, 8, 8)), np.zeros((1, 8, 8, 4)))
    bad = np.zeros((1, 8, 8, 8))
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(MetricError):
        psnr(bad, np.zeros((1, 8, 8, 8)))


def test_ssim_identity():
    """Test SSIM of a volume with itself is one"""
    x = np.random.default_rng(4).random((1, 12, 12, 12))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_volumes():
    """Zero variances leave only the luminance term"""
    c1_value, c2_value = 0.3, 0.7
    pred = np.full((1, 9, 9, 9), c1_value)
    ref = np.full((1, 9, 9, 9), c2_value)
    C1 = (0.01 * 1.0) ** 2
    expected = (2 * c1_value * c2_value + C1) / (c1_value ** 2 + c2_value ** 2 + C1)
    assert ssim(pred, ref, data_range=1.0) == pytest.approx(expected, abs=1e-9)


def test_ssim_matches_windowed_oracle(random_pair):
    """Test SSIM against a direct windowed computation"""
    pred, ref = random_pair
    expected = _windowed_ssim_oracle(pred[0], ref[0], peak=ref.max() - ref.min())
    actual = ssim(pred, ref)
    assert actual == pytest.approx(expected, abs=1e-5)
    assert actual <= 1.0


def test_ssim_too_small():
    """Test volumes smaller than the window are rejected"""
    with pytest.raises(MetricError):
        ssim(np.zeros((1, 6, 8, 8)), np.zeros((1, 6, 8, 8)))


def test_gaussian_window_normalised():
    """Test the SSIM window sums to one"""
    taps = gaussian_window()
    assert taps.numel() == 7
    assert float(taps.sum()) == pytest.approx(1.0, abs=1e-12)
    assert float(taps[3]) == pytest.approx(float(taps.max()))
