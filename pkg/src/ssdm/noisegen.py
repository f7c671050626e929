"""Gaussian white and 1/f (pink) noise at SNR-calibrated RMS levels.

SNR is the smallest gap between adjacent signal levels divided by the noise
peak-to-peak amplitude, where peak-to-peak is taken as 6 x RMS.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sigsim import StepwiseTrace

NOISE_KINDS = ("white", "pink")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "white"
    snr: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not self.snr > 0:
            raise ValueError("snr must be positive")


def snr_to_rms(levels, snr: float) -> float:
    lv = np.unique(np.asarray(levels, dtype=np.float64))
    if lv.size < 2:
        raise ValueError("need at least two distinct levels to define an SNR")
    if not snr > 0:
        raise ValueError("snr must be positive")
    return float(np.min(np.diff(lv)) / (6.0 * snr))


def white_noise(n: int, rms: float, seed=0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rms * rng.standard_normal(n)


def pink_noise(n: int, rms: float, seed=0) -> np.ndarray:
    """1/f noise by shaping a white Gaussian spectrum, rescaled to exact RMS."""
    if n < 4:
        raise ValueError("pink noise needs n >= 4")
    rng = np.random.default_rng(seed)
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n)
    scale = np.zeros_like(f)
    scale[1:] = 1.0 / np.sqrt(f[1:])
    x = np.fft.irfft(spec * scale, n)
    x -= x.mean()
    cur = np.sqrt(np.mean(x**2))
    if cur == 0 or rms == 0:
        return np.zeros(n)
    return x * (rms / cur)


def make_noise(kind: str, n: int, rms: float, seed=0) -> np.ndarray:
    if kind == "white":
        return white_noise(n, rms, seed)
    if kind == "pink":
        return pink_noise(n, rms, seed)
    raise ValueError(f"unknown noise kind {kind!r}")


def corrupt(trace: StepwiseTrace, spec: NoiseSpec) -> np.ndarray:
    """Return ``clean + noise`` with the RMS implied by ``spec.snr``.

    The levels used for the SNR are the full level set of the trace's state
    space, so traces that happen to visit one state still get noise.
    """
    rms = snr_to_rms(trace.levels, spec.snr)
    clean = np.asarray(trace.values, dtype=np.float64)
    return clean + make_noise(spec.kind, clean.size, rms, spec.seed)


def periodogram_slope(x: np.ndarray, fmin: float, fmax: float) -> float:
    """Least-squares slope of log10 power vs log10 frequency over ``[fmin, fmax]``.

    ``x`` may be 2-D (realizations x samples); periodograms are averaged first.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    p = np.mean(np.abs(np.fft.rfft(x, axis=-1)) ** 2, axis=0)
    f = np.fft.rfftfreq(x.shape[-1])
    sel = (f >= fmin) & (f <= fmax)
    slope, _ = np.polyfit(np.log10(f[sel]), np.log10(p[sel]), 1)
    return float(slope)
