"""Cosine-schedule DDPM: forward noising, reverse posterior step and inference.

Arrays are indexed by diffusion step with a leading sentinel so that
``betas[t]``, ``alphas[t]`` and ``alpha_bars[t]`` are the step-``t`` values
for ``t = 1..T`` and ``alpha_bars[0] == 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

BETA_MAX = 0.999
MAD_TO_SIGMA = 0.6745


class NonFiniteError(RuntimeError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    s: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step t={t} outside [1, {self.T}]")

    @property
    def noise_ratio(self) -> np.ndarray:
        """sqrt((1 - abar_t) / abar_t) for t = 0..T; the effective noise-to-signal ratio."""
        ab = self.alpha_bars
        with np.errstate(divide="ignore"):
            return np.sqrt((1.0 - ab) / ab)


def cosine_f(t, T: int, s: float):
    return np.cos(((np.asarray(t, dtype=np.float64) / T + s) / (1.0 + s)) * (math.pi / 2)) ** 2


def cosine_schedule(T: int = 1000, s: float = 0.008) -> DiffusionSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < s < 1:
        raise ValueError("s must lie in (0, 1)")
    f = cosine_f(np.arange(T + 1), T, s)
    betas = np.empty(T + 1)
    betas[0] = 0.0
    betas[1:] = np.minimum(1.0 - f[1:] / f[:-1], BETA_MAX)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for a in (betas, alphas, alpha_bars):
        a.flags.writeable = False
    return DiffusionSchedule(T, s, betas, alphas, alpha_bars)


def forward_noise(x0, t: int, eps, sched: DiffusionSchedule) -> np.ndarray:
    sched.check_step(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps must have the same shape")
    ab = sched.alpha_bars[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def posterior_mean(x_t, t: int, eps_hat, sched: DiffusionSchedule) -> np.ndarray:
    sched.check_step(t)
    b = sched.betas[t]
    coef = b / math.sqrt(1.0 - sched.alpha_bars[t])
    return (np.asarray(x_t, dtype=np.float64) - coef * np.asarray(eps_hat, dtype=np.float64)) / math.sqrt(
        sched.alphas[t]
    )


def reverse_step(x_t, t: int, eps_hat, z, sched: DiffusionSchedule) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1} with fixed variance beta_t."""
    mu = posterior_mean(x_t, t, eps_hat, sched)
    if z is None:
        return mu
    z = np.asarray(z, dtype=np.float64)
    if t == 1 and np.any(z != 0):
        raise ValueError("the final step (t=1) must be noise-free")
    return mu + math.sqrt(sched.betas[t]) * z


def estimate_noise_rms(y) -> float:
    """Robust noise scale from first differences (steps are outliers to the median)."""
    y = np.asarray(y, dtype=np.float64)
    if y.size < 16:
        raise ValueError("need at least 16 samples to estimate the noise level")
    return float(np.median(np.abs(np.diff(y))) / (math.sqrt(2.0) * MAD_TO_SIGMA))


def match_timestep(sigma_obs: float, sched: DiffusionSchedule) -> int:
    if sigma_obs < 0:
        raise ValueError("sigma_obs must be non-negative")
    r = sched.noise_ratio[1:]
    # argmin returns the first minimum, i.e. ties go to the smaller step
    return int(np.argmin(np.abs(r - sigma_obs))) + 1


NoisePredictor = Callable[[np.ndarray, int], np.ndarray]


def _start_steps(ys: np.ndarray, sched: DiffusionSchedule, t_start) -> np.ndarray:
    if t_start is None:
        return np.array([match_timestep(estimate_noise_rms(row), sched) for row in ys])
    starts = np.broadcast_to(np.asarray(t_start, dtype=np.int64), (ys.shape[0],)).copy()
    for t0 in np.unique(starts):
        sched.check_step(int(t0))
    return starts


def predict_x0(y, model: NoisePredictor, sched: DiffusionSchedule, t_start=None) -> np.ndarray:
    """Single-pass estimate: one noise prediction at the matched step, inverted for x0.

    With ``x_t = sqrt(abar_t) * y`` this returns ``(x_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)``,
    the network's direct estimate of the clean signal (the posterior mean when
    ``eps_hat`` is the optimal predictor).  Step selection matches ``denoise``.
    """
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    ys = np.atleast_2d(y)
    starts = _start_steps(ys, sched, t_start)
    out = np.empty_like(ys)
    for t in np.unique(starts):
        rows = starts == t
        ab = sched.alpha_bars[t]
        x = math.sqrt(ab) * ys[rows]
        eps_hat = np.asarray(model(x, int(t)), dtype=np.float64)
        if not np.all(np.isfinite(eps_hat)):
            raise NonFiniteError(f"model produced non-finite output at step t={t}")
        out[rows] = (x - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    return out[0] if single else out


def denoise(
    y,
    model: NoisePredictor,
    sched: DiffusionSchedule,
    t_start=None,
    seed=0,
    stochastic: bool = True,
) -> np.ndarray:
    """Map an observed noisy trace (or a batch of rows) into the reverse chain.

    ``model(x_t, t)`` takes and returns arrays shaped like its input.
    ``t_start`` may be one step for all rows or one per row.  Unless it is
    given, each row enters the chain at the step whose noise
    ratio matches its robustly estimated noise level, scaled by
    ``sqrt(abar_t)``, and is then run down to ``t = 1``.  Ancestral noise is
    added on every step except the last; ``stochastic=False`` keeps only the
    posterior mean.
    """
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    ys = np.atleast_2d(y)
    starts = _start_steps(ys, sched, t_start)
    rng = np.random.default_rng(seed)
    x = np.sqrt(sched.alpha_bars[starts])[:, None] * ys
    for t in range(int(starts.max()), 0, -1):
        active = starts >= t
        xa = x[active]
        eps_hat = np.asarray(model(xa, t), dtype=np.float64)
        if not np.all(np.isfinite(eps_hat)):
            raise NonFiniteError(f"model produced non-finite output at step t={t}")
        z = rng.standard_normal(xa.shape) if (stochastic and t > 1) else None
        x[active] = reverse_step(xa, t, eps_hat, z, sched)
    big = np.finfo(np.float64).max
    x = np.nan_to_num(x, nan=0.0, posinf=big, neginf=-big)
    return x[0] if single else x
