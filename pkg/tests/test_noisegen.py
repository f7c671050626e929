import numpy as np
import pytest

from ssdm.noisegen import NoiseSpec, corrupt, periodogram_slope, pink_noise, snr_to_rms, white_noise
from ssdm.sigsim import RateMatrix, levels_from_path, simulate_ctmc


@pytest.mark.parametrize(
    "levels, snr, expected",
    [
        ([0, 1], 1, 1 / 6),
        ([0, 0.5, 1], 3, 0.5 / 18),
        ([0, 1 / 3, 2 / 3, 1], 0.25, (1 / 3) / 1.5),
    ],
)
def test_snr_to_rms(levels, snr, expected):
    assert snr_to_rms(levels, snr) == pytest.approx(expected, rel=1e-12)


def test_snr_to_rms_needs_two_levels():
    with pytest.raises(ValueError):
        snr_to_rms([0.5, 0.5], 1)
    with pytest.raises(ValueError):
        NoiseSpec("white", 0.0)


def test_white_noise_moments():
    assert np.all(white_noise(100, 0.0, seed=1) == 0)
    n = 10**6
    x = white_noise(n, 0.1, seed=2)
    assert abs(x.std() - 0.1) < 0.001
    assert abs(x.mean()) < 4 * 0.1 / np.sqrt(n)


def test_pink_noise_exact_rms_and_zero_mean():
    x = pink_noise(4096, 0.37, seed=3)
    assert np.sqrt(np.mean(x**2)) == pytest.approx(0.37, abs=1e-9)
    assert abs(x.mean()) < 1e-9


def test_pink_and_white_periodogram_slopes():
    pink = np.stack([pink_noise(4096, 1.0, seed=s) for s in range(60)])
    white = np.stack([white_noise(4096, 1.0, seed=s) for s in range(60)])
    assert periodogram_slope(pink, 0.01, 0.1) == pytest.approx(-1.0, abs=0.15)
    assert periodogram_slope(white, 0.01, 0.1) == pytest.approx(0.0, abs=0.1)


def test_generators_are_pure():
    assert np.array_equal(pink_noise(512, 0.2, 9), pink_noise(512, 0.2, 9))
    assert np.array_equal(white_noise(512, 0.2, 9), white_noise(512, 0.2, 9))


def _two_state_trace(n):
    M = RateMatrix.from_rows([[-0.01, 0.01], [0.01, -0.01]])
    return levels_from_path(simulate_ctmc(M, n, 1.0, seed=0), 2)


def test_corrupt_variance_matches_snr():
    tr = _two_state_trace(10**6)
    y = corrupt(tr, NoiseSpec("white", 1.0, seed=4))
    assert np.mean((y - tr.values) ** 2) == pytest.approx((1 / 6) ** 2, rel=0.02)


def test_corrupt_high_snr_limit_and_determinism():
    tr = _two_state_trace(1000)
    y = corrupt(tr, NoiseSpec("white", 1e12, seed=1))
    assert np.allclose(y, tr.values, atol=1e-9)
    a = corrupt(tr, NoiseSpec("pink", 3.0, seed=5))
    b = corrupt(tr, NoiseSpec("pink", 3.0, seed=5))
    assert np.array_equal(a, b)
    assert np.sqrt(np.mean((a - tr.values) ** 2)) == pytest.approx(1 / 18, abs=1e-9)
