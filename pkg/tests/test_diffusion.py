import math

import mpmath as mp
import numpy as np
import pytest

from ssdm.diffusion import (
    NonFiniteError,
    cosine_f,
    cosine_schedule,
    denoise,
    estimate_noise_rms,
    forward_noise,
    match_timestep,
    posterior_mean,
    predict_x0,
    reverse_step,
)

SCHED = cosine_schedule(1000, 0.008)


def _mp_schedule(T=1000, s=0.008, dps=40):
    """Independent extended-precision evaluation of the closed form."""
    with mp.workdps(dps):
        s = mp.mpf(s)
        f = [mp.cos(((mp.mpf(t) / T + s) / (1 + s)) * mp.pi / 2) ** 2 for t in range(T + 1)]
        betas = [mp.mpf(0)] + [min(1 - f[t] / f[t - 1], mp.mpf("0.999")) for t in range(1, T + 1)]
        ab = [mp.mpf(1)]
        for t in range(1, T + 1):
            ab.append(ab[-1] * (1 - betas[t]))
        return f, betas, ab


MP_F, MP_BETAS, MP_AB = _mp_schedule()


def test_f0_extended_precision():
    assert abs(float(MP_F[0]) - 0.9998446) <= 1e-7
    assert abs(float(cosine_f(0, 1000, 0.008)) - 0.9998446) <= 1e-7


def test_alpha_bar_T_small():
    assert float(MP_AB[-1]) < 1e-4
    assert SCHED.alpha_bars[-1] < 1e-4


def test_schedule_matches_extended_precision():
    ab = np.array([float(a) for a in MP_AB])
    assert np.allclose(SCHED.alpha_bars[:-5], ab[:-5], rtol=1e-10, atol=0)
    assert np.allclose(SCHED.betas, [float(b) for b in MP_BETAS], rtol=1e-9, atol=1e-15)


def test_schedule_invariants():
    b = SCHED.betas[1:]
    assert np.all((b > 0) & (b <= 0.999))
    assert np.all(np.diff(SCHED.alpha_bars) < 0)
    assert SCHED.alpha_bars[0] == 1.0
    prod = np.cumprod(SCHED.alphas[1:])
    assert np.allclose(SCHED.alpha_bars[1:], prod, rtol=1e-12, atol=0)
    clipped = np.flatnonzero(SCHED.betas >= 0.999)
    assert clipped.min() >= 990


def test_schedule_arrays_read_only():
    with pytest.raises(ValueError):
        SCHED.betas[3] = 0.5


@pytest.mark.parametrize("T, s", [(0, 0.008), (10, 0.0), (10, 1.0)])
def test_schedule_rejects_bad_args(T, s):
    with pytest.raises(ValueError):
        cosine_schedule(T, s)


def test_forward_noise_zero_eps_and_range():
    x0 = np.linspace(0, 1, 50)
    assert np.array_equal(forward_noise(x0, 100, np.zeros(50), SCHED), math.sqrt(SCHED.alpha_bars[100]) * x0)
    for t in (0, 1001):
        with pytest.raises(ValueError):
            forward_noise(x0, t, np.zeros(50), SCHED)
    with pytest.raises(ValueError):
        forward_noise(x0, 5, np.zeros(49), SCHED)


def test_forward_noise_at_T_is_nearly_eps():
    eps = np.random.default_rng(0).standard_normal(200)
    xT = forward_noise(np.zeros(200), 1000, eps, SCHED)
    assert np.max(np.abs(xT - eps)) <= abs(1 - math.sqrt(1 - SCHED.alpha_bars[1000])) * np.max(np.abs(eps)) + 1e-15


@pytest.mark.parametrize("t", [10, 100, 500, 1000])
def test_forward_noise_moments(t):
    rng = np.random.default_rng(t)
    x0 = 0.5
    eps = rng.standard_normal(10_000)
    xt = forward_noise(np.full(eps.shape, x0), t, eps, SCHED)
    ab = SCHED.alpha_bars[t]
    sd = math.sqrt(1 - ab)
    assert abs(xt.mean() - math.sqrt(ab) * x0) <= 3 * sd / 100
    assert abs(xt.std() / sd - 1) <= 0.02


def test_posterior_mean_zero_eps():
    x = np.array([0.3, -1.0, 2.0])
    assert np.allclose(posterior_mean(x, 7, np.zeros(3), SCHED), x / math.sqrt(SCHED.alphas[7]), rtol=0, atol=1e-15)


@pytest.mark.parametrize("t", [1, 10, 500, 999, 1000])
def test_posterior_mean_algebraic_oracle(t):
    rng = np.random.default_rng(t)
    x0 = rng.random(8)
    eps = rng.standard_normal(8)
    got = posterior_mean(forward_noise(x0, t, eps, SCHED), t, eps, SCHED)
    ab, b = MP_AB[t], MP_BETAS[t]
    a = 1 - b
    with mp.workdps(40):
        want = [
            (mp.sqrt(ab) * mp.mpf(x) + (mp.sqrt(1 - ab) - b / mp.sqrt(1 - ab)) * mp.mpf(e)) / mp.sqrt(a)
            for x, e in zip(x0, eps)
        ]
    assert np.allclose(got, [float(w) for w in want], rtol=1e-10, atol=1e-10)


def test_posterior_mean_linear():
    rng = np.random.default_rng(1)
    x, e = rng.standard_normal(20), rng.standard_normal(20)
    a = -2.7
    assert np.allclose(
        posterior_mean(a * x, 300, a * e, SCHED), a * posterior_mean(x, 300, e, SCHED), rtol=1e-12, atol=1e-12
    )


def test_reverse_step_mean_and_variance():
    rng = np.random.default_rng(2)
    x, e = rng.standard_normal(5), rng.standard_normal(5)
    mu = posterior_mean(x, 200, e, SCHED)
    assert np.array_equal(reverse_step(x, 200, e, np.zeros(5), SCHED), mu)
    assert np.array_equal(reverse_step(x, 200, e, None, SCHED), mu)
    z = rng.standard_normal((10_000, 5))
    out = reverse_step(np.broadcast_to(x, z.shape), 200, np.broadcast_to(e, z.shape), z, SCHED)
    assert np.all(np.abs(out.var(0) / SCHED.betas[200] - 1) <= 0.03)


def test_reverse_step_final_must_be_noise_free():
    x = np.ones(3)
    assert np.array_equal(reverse_step(x, 1, np.zeros(3), np.zeros(3), SCHED), x / math.sqrt(SCHED.alphas[1]))
    with pytest.raises(ValueError):
        reverse_step(x, 1, np.zeros(3), np.ones(3), SCHED)


@pytest.mark.parametrize("t", [10, 100, 500])
def test_oracle_reverse_step_moves_toward_signal(t):
    rng = np.random.default_rng(t)
    x0 = np.repeat([0.0, 1.0], 500)
    eps = rng.standard_normal((200, x0.size))
    xt = forward_noise(np.broadcast_to(x0, eps.shape), t, eps, SCHED)
    z = rng.standard_normal(eps.shape)
    prev = reverse_step(xt, t, eps, z, SCHED)
    target = math.sqrt(SCHED.alpha_bars[t - 1]) * x0
    assert np.mean((prev - target) ** 2) < np.mean((xt - target) ** 2)


def test_estimate_noise_rms():
    y = np.random.default_rng(3).normal(0, 0.1, 10**5)
    assert estimate_noise_rms(y) == pytest.approx(0.1, rel=0.03)
    assert estimate_noise_rms(np.full(100, 0.4)) == 0.0
    clean = np.repeat(np.arange(11) % 2, [91] * 10 + [90]).astype(float)
    assert np.count_nonzero(np.diff(clean)) == 10
    assert estimate_noise_rms(clean) <= 0.02
    with pytest.raises(ValueError):
        estimate_noise_rms(np.zeros(15))


def test_match_timestep():
    assert match_timestep(0.0, SCHED) == 1
    r500 = math.sqrt(1 - SCHED.alpha_bars[500]) / math.sqrt(SCHED.alpha_bars[500])
    assert match_timestep(r500, SCHED) == 500
    sig = np.linspace(0, 50, 400)
    ts = [match_timestep(s, SCHED) for s in sig]
    assert all(a <= b for a, b in zip(ts, ts[1:]))
    with pytest.raises(ValueError):
        match_timestep(-0.1, SCHED)


def _zero_model(x, t):
    return np.zeros_like(x)


def test_denoise_single_zero_step_is_identity():
    y = np.random.default_rng(4).random(100)
    assert np.allclose(denoise(y, _zero_model, SCHED, t_start=1), y, rtol=1e-15, atol=0)


def test_denoise_deterministic_and_shape():
    y = np.random.default_rng(5).normal(0.5, 0.1, (3, 64))
    a = denoise(y, lambda x, t: 0.1 * x, SCHED, seed=9)
    b = denoise(y, lambda x, t: 0.1 * x, SCHED, seed=9)
    assert a.shape == y.shape and np.array_equal(a, b)
    assert denoise(y[0], _zero_model, SCHED, t_start=20).shape == (64,)


def test_denoise_per_row_starts():
    y = np.ones((2, 32))
    seen = []

    def model(x, t):
        seen.append((t, x.shape[0]))
        return np.zeros_like(x)

    denoise(y, model, SCHED, t_start=[3, 1], stochastic=False)
    assert seen == [(3, 1), (2, 1), (1, 2)]


def test_denoise_rejects_non_finite_model():
    with pytest.raises(NonFiniteError, match="t=5"):
        denoise(np.zeros(32), lambda x, t: np.full_like(x, np.nan), SCHED, t_start=5)
    with pytest.raises(ValueError):
        denoise(np.zeros(32), _zero_model, SCHED, t_start=0)


def test_predict_x0_zero_model_is_identity():
    y = np.random.default_rng(6).random((2, 50))
    assert np.allclose(predict_x0(y, _zero_model, SCHED, t_start=[1, 300]), y, rtol=1e-14, atol=0)


@pytest.mark.parametrize("t", [1, 30, 400])
def test_predict_x0_with_oracle_noise_recovers_signal(t):
    rng = np.random.default_rng(t)
    x0 = np.repeat(rng.integers(0, 2, 8), 8).astype(float)
    ab = SCHED.alpha_bars[t]
    y = x0 + math.sqrt((1 - ab) / ab) * rng.standard_normal(x0.size)

    def oracle(x, step):
        # the exact noise that maps sqrt(abar) * x0 to x
        return (x - math.sqrt(SCHED.alpha_bars[step]) * x0) / math.sqrt(1 - SCHED.alpha_bars[step])

    assert np.allclose(predict_x0(y, oracle, SCHED, t_start=t), x0, atol=1e-12)


def test_predict_x0_matched_step_and_errors():
    seen = []

    def model(x, t):
        seen.append(t)
        return np.zeros_like(x)

    y = np.random.default_rng(7).normal(0, 0.2, 400)
    predict_x0(y, model, SCHED)
    assert seen == [match_timestep(estimate_noise_rms(y), SCHED)]
    with pytest.raises(NonFiniteError):
        predict_x0(y, lambda x, t: np.full_like(x, np.inf), SCHED, t_start=3)
    with pytest.raises(ValueError):
        predict_x0(y, _zero_model, SCHED, t_start=1001)
