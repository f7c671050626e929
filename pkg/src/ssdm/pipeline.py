"""End-to-end helpers: dataset assembly, windowed denoising and benchmarking."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import baselines, evalkit
from .analysis import normalize_trace, window_trace
from .diffusion import DiffusionSchedule, denoise, estimate_noise_rms, match_timestep, predict_x0
from .nnet import NetConfig, UNet1D, as_predictor
from .noisegen import NoiseSpec, corrupt
from .sigsim import RateMatrix, StepwiseTrace, generate_traces, load_catalog
from .trainer import Checkpoint, LossConfig, TrainConfig, fit

log = logging.getLogger(__name__)


def balanced_traces(
    catalog: Sequence[RateMatrix], per_k: int, N: int = 1000, seed: int = 0, ks=(2, 3, 4)
) -> list[StepwiseTrace]:
    """``per_k`` traces for each state count, assigned round-robin over that count's matrices."""
    out = []
    for K in ks:
        mats = [m for m in catalog if m.K == K]
        counts = [per_k // len(mats) + (i < per_k % len(mats)) for i in range(len(mats))]
        for i, (m, c) in enumerate(zip(mats, counts)):
            if c:
                out.extend(generate_traces(m, c, N, 1.0, seed=int(np.random.SeedSequence([seed, K, i]).generate_state(1)[0])))
    return out


def desk_training_set(per_k: int = 200, N: int = 1000, seed: int = 0) -> np.ndarray:
    traces = balanced_traces(load_catalog("train"), per_k, N, seed)
    return np.stack([t.values for t in traces])


DESK_NET = NetConfig(base_channels=32)
DESK_TRAIN = TrainConfig(epochs=30, seed=0)


def train_desk_model(out_dir=None, per_k: int = 200, train_cfg: TrainConfig = DESK_TRAIN) -> Checkpoint:
    """Desk-scale reference run: base 32 channels, 200 clean traces per state count."""
    return fit(desk_training_set(per_k, 1000, seed=train_cfg.seed), train_cfg=train_cfg, loss_cfg=LossConfig(), net_cfg=DESK_NET, out_dir=out_dir)


@dataclass
class TestSet:
    clean: list[StepwiseTrace]
    noisy: np.ndarray
    snr: float
    noise: str

    @property
    def Ks(self) -> list[int]:
        return [t.K for t in self.clean]


def noisy_copies(clean: Sequence[StepwiseTrace], snr: float, noise: str = "white", seed: int = 0) -> np.ndarray:
    seeds = np.random.SeedSequence([seed, int(round(snr * 1000))]).generate_state(len(clean))
    return np.stack([corrupt(t, NoiseSpec(noise, snr, int(s))) for t, s in zip(clean, seeds)])


def desk_test_set(per_k: int = 50, snr: float = 3.0, noise: str = "white", N: int = 1000, seed: int = 1) -> TestSet:
    clean = balanced_traces(load_catalog("test"), per_k, N, seed)
    return TestSet(clean, noisy_copies(clean, snr, noise, seed), snr, noise)


INFERENCE_MODES = ("single", "chain", "chain_mean")


class SSDMDenoiser:
    """Denoise traces of any length >= the model window with a trained network.

    ``mode`` picks how an observed trace enters the model at its matched step:
    ``"single"`` takes one x0 prediction, ``"chain"`` runs the stochastic reverse
    chain down to t = 1 and ``"chain_mean"`` runs it with posterior means only.
    """

    def __init__(self, net: UNet1D, sched: DiffusionSchedule, batch_size: int = 64, overlap: int = 500, mode: str = "single"):
        if mode not in INFERENCE_MODES:
            raise ValueError(f"mode must be one of {INFERENCE_MODES}, got {mode!r}")
        self.mode = mode
        self.net = net
        self.sched = sched
        self.model = as_predictor(net, batch_size)
        self.window = net.cfg.input_len
        self.overlap = min(overlap, self.window // 2)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, **kw) -> "SSDMDenoiser":
        return cls(ckpt.build_net(), ckpt.schedule(), **kw)

    def denoise_normalized(self, ys, t_start: int | None = None, seed: int = 0) -> np.ndarray:
        """Denoise traces already on the [0, 1] level scale (a list or 2-D array)."""
        ys = [np.asarray(y, dtype=np.float64) for y in ys]
        plans, chunks = [], []
        for y in ys:
            w, plan = window_trace(y, self.window, self.overlap)
            plans.append(plan)
            chunks.append(w)
        flat = np.concatenate(chunks, axis=0)
        if t_start is None:
            # one start step per trace, shared by all of its windows
            starts = np.concatenate(
                [np.full(c.shape[0], match_timestep(estimate_noise_rms(y), self.sched)) for y, c in zip(ys, chunks)]
            )
        else:
            starts = t_start
        if self.mode == "single":
            out = predict_x0(flat, self.model, self.sched, starts)
        else:
            out = denoise(flat, self.model, self.sched, starts, seed=seed, stochastic=self.mode == "chain")
        res, k = [], 0
        for plan, c in zip(plans, chunks):
            res.append(plan.stitch(out[k : k + c.shape[0]]))
            k += c.shape[0]
        return res

    def denoise_raw(self, y, t_start: int | None = None, seed: int = 0):
        """Normalize, denoise and rescale a trace in signal units; returns ``(x_hat, x_hat_normalized, record)``."""
        yn, rec = normalize_trace(y)
        xn = self.denoise_normalized([yn], t_start, seed)[0]
        return rec.invert(xn), xn, rec


# -- benchmark ------------------------------------------------------------

BENCH_COLUMNS = ("method", "K", "snr", "mse_mean", "f1_mean", "score_mean_of_traces", "score_pooled", "n_traces")


def _rows(method: str, snr: float, reports: list[evalkit.EvalReport]) -> list[dict]:
    rows = []
    for K in sorted({r.K for r in reports}):
        agg = evalkit.aggregate([r for r in reports if r.K == K])
        s = agg.summary()
        rows.append({"method": method, "K": K, "snr": snr, **{c: s[c] for c in BENCH_COLUMNS[3:]}})
    return rows


def run_method(method: str, ts: TestSet, denoiser: SSDMDenoiser | None = None, lowpass_cfg=None, seed: int = 0):
    """Denoise a test set with one method; returns per-trace reports (and extra info)."""
    gt = [t.values for t in ts.clean]
    extra = {}
    if method == "ssdm":
        if denoiser is None:
            raise ValueError("ssdm needs a trained denoiser")
        preds = denoiser.denoise_normalized(ts.noisy, seed=seed)
    elif method == "lowpass":
        cfg = lowpass_cfg or baselines.LowpassConfig()
        gs = baselines.grid_search_cutoff(ts.noisy, gt, ts.Ks, cfg)
        extra["fc"] = gs.best_fc
        preds = [baselines.butterworth_lowpass(y, gs.best_fc, cfg.order, cfg.phase_mode) for y in ts.noisy]
    elif method == "hmm":
        preds = []
        for y in ts.noisy:
            x_hat, sel = baselines.hmm_baseline(y)
            preds.append(x_hat)
    elif method == "noisy":
        preds = list(ts.noisy)
    else:
        raise ValueError(f"unknown method {method!r}")
    reports = [
        evalkit.evaluate_trace(p, x, t.K, id=str(i), snr=ts.snr, method=method)
        for i, (p, x, t) in enumerate(zip(preds, gt, ts.clean))
    ]
    return reports, preds, extra


def benchmark(
    methods: Sequence[str],
    snrs: Sequence[float],
    per_k: int = 50,
    denoiser: SSDMDenoiser | None = None,
    noise: str = "white",
    seed: int = 1,
):
    """Aggregate rows per (method, snr, K) over a balanced test set at each SNR."""
    clean = balanced_traces(load_catalog("test"), per_k, 1000, seed)
    rows, all_reports = [], []
    for snr in snrs:
        ts = TestSet(clean, noisy_copies(clean, snr, noise, seed), snr, noise)
        for m in methods:
            reps, _, extra = run_method(m, ts, denoiser)
            for r in reps:
                r.method = m
            all_reports.extend(reps)
            rows.extend(_rows(m, snr, reps))
            log.info("benchmark %s snr=%g done %s", m, snr, extra)
    return rows, all_reports
