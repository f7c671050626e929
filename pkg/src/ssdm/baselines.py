"""Comparison methods: Butterworth low-pass filtering and a Gaussian HMM.

The low-pass cutoff is picked by grid search on the same Score used for the
diffusion model.  The HMM is fitted by Baum-Welch for each candidate state
count, the count is chosen by BIC, and every sample is replaced by the mean
of its most probable state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
from scipy import signal

from . import evalkit

log = logging.getLogger(__name__)

DEFAULT_CUTOFFS = tuple(float(f) for f in np.geomspace(0.01, 0.08, 8))


# -- low-pass filter --------------------------------------------------------


@dataclass(frozen=True)
class LowpassConfig:
    order: int = 4
    cutoffs: tuple[float, ...] = DEFAULT_CUTOFFS
    phase_mode: str = "zero_phase"

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if any(not 0 < f < 0.5 for f in self.cutoffs):
            raise ValueError("cutoffs must lie in (0, 0.5) cycles/sample")
        if self.phase_mode not in ("causal", "zero_phase"):
            raise ValueError(f"unknown phase_mode {self.phase_mode!r}")


def butterworth_sos(fc: float, order: int = 4) -> np.ndarray:
    if not 0 < fc < 0.5:
        raise ValueError("fc must lie in (0, 0.5) cycles/sample")
    sos = signal.butter(order, fc, btype="low", fs=1.0, output="sos")
    poles = np.concatenate([np.roots(np.r_[1.0, s[4:6]]) for s in sos])
    if np.any(np.abs(poles) >= 1):
        raise RuntimeError(f"unstable Butterworth design at fc={fc}, order={order}")
    return sos


def butterworth_lowpass(x, fc: float, order: int = 4, phase_mode: str = "zero_phase") -> np.ndarray:
    """Order-``order`` Butterworth low-pass with its -3 dB point at ``fc`` cycles/sample.

    ``zero_phase`` runs the cascade forward and backward (squared magnitude,
    no delay); ``causal`` runs it forward once, starting from the steady
    state of the first sample.
    """
    x = np.asarray(x, dtype=np.float64)
    sos = butterworth_sos(fc, order)
    if phase_mode == "zero_phase":
        return signal.sosfiltfilt(sos, x)
    if phase_mode == "causal":
        zi = signal.sosfilt_zi(sos) * x[0]
        y, _ = signal.sosfilt(sos, x, zi=zi)
        return y
    raise ValueError(f"unknown phase_mode {phase_mode!r}")


@dataclass
class GridSearchResult:
    best_fc: float
    reports: dict[float, evalkit.DatasetReport]


def grid_search_cutoff(noisy, gt, Ks, cfg: LowpassConfig = LowpassConfig()) -> GridSearchResult:
    """Pick the cutoff maximizing the mean per-trace Score; ties go to the larger cutoff."""
    if not cfg.cutoffs:
        raise ValueError("empty candidate list")
    noisy = list(noisy)
    gt = list(gt)
    Ks = list(Ks)
    if not noisy or len(noisy) != len(gt) or len(gt) != len(Ks):
        raise ValueError("need a non-empty, equally sized set of noisy/gt/K")
    reports = {}
    for fc in sorted(set(cfg.cutoffs)):
        reps = [
            evalkit.evaluate_trace(butterworth_lowpass(y, fc, cfg.order, cfg.phase_mode), x, K, id=str(i), method="lowpass")
            for i, (y, x, K) in enumerate(zip(noisy, gt, Ks))
        ]
        reports[fc] = evalkit.aggregate(reps, fc=fc)
    best = max(reports, key=lambda f: (reports[f].score_mean, f))
    return GridSearchResult(best, reports)


# -- hidden Markov model ----------------------------------------------------


class HmmUnderflowError(FloatingPointError):
    """The observation sequence has zero probability under the model."""


@dataclass
class HmmModel:
    pi: np.ndarray
    A: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    loglik_history: list[float] = field(default_factory=list)
    degenerate: bool = False

    @property
    def K(self) -> int:
        return int(self.means.shape[0])

    def validate(self) -> None:
        if abs(self.pi.sum() - 1) > 1e-9 or np.any(np.abs(self.A.sum(axis=1) - 1) > 1e-9):
            raise ValueError("pi and rows of A must sum to 1")
        if np.any(self.pi < 0) or np.any(self.A < 0):
            raise ValueError("probabilities must be non-negative")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")

    def permuted(self, perm) -> "HmmModel":
        p = np.asarray(perm)
        return HmmModel(self.pi[p], self.A[np.ix_(p, p)], self.means[p], self.variances[p])


def _log_emissions(model: HmmModel, obs: np.ndarray) -> np.ndarray:
    var = model.variances[None, :]
    return -0.5 * (np.log(2 * np.pi * var) + (obs[:, None] - model.means[None, :]) ** 2 / var)


@numba.njit(cache=True)
def _scaled_recursions(pi, A, emis, backward):
    n, K = emis.shape
    alpha = np.empty((n, K))
    scale = np.empty(n)
    beta = np.ones((n, K))
    a = pi * emis[0]
    for t in range(n):
        if t:
            a = (a @ A) * emis[t]
        c = a.sum()
        if not c > 0:
            # signal the failing sample to the caller
            scale[t] = 0.0
            return alpha, beta, scale, t
        a = a / c
        alpha[t] = a
        scale[t] = c
    if backward:
        for t in range(n - 2, -1, -1):
            beta[t] = (A @ (emis[t + 1] * beta[t + 1])) / scale[t + 1]
    return alpha, beta, scale, -1


def _forward_backward(model: HmmModel, obs: np.ndarray, backward: bool = True):
    """Scaled forward (and backward) pass.

    Returns ``(loglik, alpha, beta, scale, emis)`` where ``emis`` holds the
    emission likelihoods divided by their per-sample maximum.
    """
    logB = _log_emissions(model, obs)
    offset = logB.max(axis=1)
    emis = np.exp(logB - offset[:, None])
    pi = np.ascontiguousarray(model.pi, dtype=np.float64)
    A = np.ascontiguousarray(model.A, dtype=np.float64)
    alpha, beta, scale, bad = _scaled_recursions(pi, A, emis, backward)
    if bad >= 0:
        raise HmmUnderflowError(f"zero forward probability at sample {bad}")
    loglik = float(np.log(scale).sum() + offset.sum())
    return loglik, alpha, (beta if backward else None), scale, emis


def hmm_forward_loglik(model: HmmModel, obs) -> float:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim != 1 or obs.size == 0 or not np.all(np.isfinite(obs)):
        raise ValueError("observations must be a non-empty finite 1-D sequence")
    model.validate()
    return _forward_backward(model, obs, backward=False)[0]


def hmm_posteriors(model: HmmModel, obs) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    _, alpha, beta, _, _ = _forward_backward(model, obs)
    g = alpha * beta
    return g / g.sum(axis=1, keepdims=True)


def initial_model(obs: np.ndarray, K: int) -> HmmModel:
    q = (np.arange(K) + 0.5) / K
    means = np.quantile(obs, q)
    var = max(float(np.var(obs)), VAR_FLOOR)
    A = np.full((K, K), 0.1 / (K - 1)) if K > 1 else np.ones((1, 1))
    if K > 1:
        np.fill_diagonal(A, 0.9)
    return HmmModel(np.full(K, 1.0 / K), A, means, np.full(K, var))


VAR_FLOOR = 1e-6


def baum_welch_fit(obs, K: int, max_iter: int = 200, tol: float = 1e-6) -> HmmModel:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.size < 10 * K:
        raise ValueError(f"need at least {10 * K} observations to fit K={K}")
    model = initial_model(obs, K)
    if np.ptp(obs) == 0:
        log.warning("constant observations; returning single-cluster HMM fit")
        model.variances[:] = VAR_FLOOR
        model.loglik_history = [hmm_forward_loglik(model, obs)]
        model.degenerate = True
        return model
    history = []
    for _ in range(max_iter):
        ll, alpha, beta, scale, emis = _forward_backward(model, obs)
        history.append(ll)
        if len(history) > 1 and history[-1] - history[-2] < tol:
            break
        gamma = alpha * beta
        gamma /= gamma.sum(axis=1, keepdims=True)
        # expected transition counts, summed over time
        xi = model.A * (alpha[:-1].T @ (emis[1:] * beta[1:] / scale[1:, None]))
        occ = gamma.sum(axis=0)
        pi = gamma[0] / gamma[0].sum()
        A = xi / xi.sum(axis=1, keepdims=True)
        means = model.means.copy()
        variances = model.variances.copy()
        live = occ > 1e-12
        means[live] = (gamma[:, live] * obs[:, None]).sum(axis=0) / occ[live]
        variances[live] = (gamma[:, live] * (obs[:, None] - means[live]) ** 2).sum(axis=0) / occ[live]
        variances = np.maximum(variances, VAR_FLOOR)
        A = np.where(np.isfinite(A), A, model.A)
        model = HmmModel(pi, A, means, variances)
    model.loglik_history = history
    return model


def n_free_params(K: int) -> int:
    return (K - 1) + K * (K - 1) + 2 * K


def bic(loglik: float, K: int, n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    return -2.0 * loglik + n_free_params(K) * math.log(n)


@dataclass
class StateSelection:
    K: int
    model: HmmModel
    bic_table: dict[int, float]


def select_num_states(obs, candidates: Sequence[int] = (2, 3, 4, 5, 6), **fit_kw) -> StateSelection:
    obs = np.asarray(obs, dtype=np.float64)
    table, models = {}, {}
    for K in sorted(candidates):
        m = baum_welch_fit(obs, K, **fit_kw)
        if m.degenerate:
            continue
        models[K] = m
        table[K] = bic(hmm_forward_loglik(m, obs), K, obs.size)
    if not table:
        raise ValueError("every candidate fit was degenerate")
    best = min(table, key=lambda k: (table[k], k))
    return StateSelection(best, models[best], table)


def hmm_denoise(obs, model: HmmModel) -> np.ndarray:
    post = hmm_posteriors(model, obs)
    return model.means[np.argmax(post, axis=1)]


def hmm_baseline(obs, candidates: Sequence[int] = (2, 3, 4, 5, 6)) -> tuple[np.ndarray, StateSelection]:
    sel = select_num_states(obs, candidates)
    return hmm_denoise(obs, sel.model), sel
