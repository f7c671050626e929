"""Trace preparation and post-denoising analysis.

Covers percentile normalization, overlapping windows for fixed-length model
inputs, two-state dwell-time kinetics (sm-FRET style) and threshold-based
event extraction (nanopore style).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_DWELLS = 10


@dataclass(frozen=True)
class NormalizationRecord:
    low: float
    high: float

    def apply(self, y):
        return (np.asarray(y, dtype=np.float64) - self.low) / (self.high - self.low)

    def invert(self, y_norm):
        return self.low + np.asarray(y_norm, dtype=np.float64) * (self.high - self.low)


def normalize_trace(y, low_pct: float = 1.0, high_pct: float = 99.0, clip=(-0.5, 1.5)):
    """Map the 1st/99th percentiles of ``y`` to 0/1; returns ``(y_norm, record)``."""
    y = np.asarray(y, dtype=np.float64)
    if y.size < 10:
        raise ValueError("need at least 10 samples to normalize")
    low, high = np.percentile(y, [low_pct, high_pct])
    if not high > low:
        raise ValueError("cannot normalize a constant trace")
    rec = NormalizationRecord(float(low), float(high))
    out = rec.apply(y)
    if clip is not None:
        out = np.clip(out, *clip)
    return out, rec


def denormalize(y_norm, rec: NormalizationRecord):
    return rec.invert(y_norm)


@dataclass(frozen=True)
class WindowPlan:
    length: int
    window: int
    starts: tuple[int, ...]

    def cut(self, y) -> np.ndarray:
        y = np.asarray(y)
        return np.stack([y[s : s + self.window] for s in self.starts])

    def stitch(self, windows) -> np.ndarray:
        """Reassemble windows, cross-fading linearly wherever two overlap.

        Blending is done as ``a + w (b - a)``, so identical overlapping values
        are reproduced exactly.
        """
        windows = np.asarray(windows, dtype=np.float64)
        out = np.empty(self.length)
        end = 0
        for k, s in enumerate(self.starts):
            win = windows[k]
            ov = max(0, end - s)
            if ov:
                w = (np.arange(ov) + 0.5) / ov
                out[s:end] = out[s:end] + w * (win[:ov] - out[s:end])
            out[s + ov : s + self.window] = win[ov:]
            end = s + self.window
        return out


def window_trace(y, window: int = 1000, overlap: int = 500) -> tuple[np.ndarray, WindowPlan]:
    n = len(y)
    if n < window:
        raise ValueError(f"trace of length {n} is shorter than the window ({window})")
    if not 0 <= overlap < window:
        raise ValueError("overlap must lie in [0, window)")
    stride = window - overlap
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] + window < n:
        starts.append(n - window)
    plan = WindowPlan(n, window, tuple(starts))
    return plan.cut(y), plan


# -- kinetics -------------------------------------------------------------


def run_lengths(states) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(values, lengths)`` of the maximal constant runs in ``states``."""
    s = np.asarray(states)
    if s.size == 0:
        return s[:0], np.zeros(0, dtype=np.int64)
    cuts = np.flatnonzero(s[1:] != s[:-1]) + 1
    bounds = np.r_[0, cuts, s.size]
    return s[bounds[:-1]], np.diff(bounds)


def dwell_times(states, dt: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Dwell durations in states 0 and 1, dropping the censored first and last runs."""
    s = np.asarray(states)
    if s.size and not np.all((s == 0) | (s == 1)):
        raise ValueError("dwell_times expects a 0/1 state sequence")
    vals, lens = run_lengths(s)
    vals, lens = vals[1:-1], lens[1:-1]
    return lens[vals == 0] * dt, lens[vals == 1] * dt


def fit_rate(dwells) -> float:
    """Maximum-likelihood exponential rate, ``1 / mean(dwells)``."""
    d = np.asarray(dwells, dtype=np.float64)
    if d.size < MIN_DWELLS:
        raise ValueError(f"need at least {MIN_DWELLS} dwells, got {d.size}")
    return float(1.0 / d.mean())


def dwell_histogram(dwells, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Counts over log-spaced bins; returns ``(edges, counts)``."""
    d = np.asarray(dwells, dtype=np.float64)
    if d.size == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    lo, hi = d.min(), d.max()
    edges = np.geomspace(lo, hi * (1 + 1e-9), bins + 1) if hi > lo else np.array([lo, lo * 1.001 + 1e-12])
    counts, edges = np.histogram(d, bins=edges)
    return edges, counts


@dataclass
class KineticsReport:
    levels: tuple[float, float]
    threshold: float
    k12: float | None
    k21: float | None
    n_dwells: tuple[int, int]
    mean_dwell: tuple[float | None, float | None]
    flags: list[str] = field(default_factory=list)
    histograms: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "levels": list(self.levels),
            "threshold": self.threshold,
            "k12": self.k12,
            "k21": self.k21,
            "n_dwells": list(self.n_dwells),
            "mean_dwell": list(self.mean_dwell),
            "flags": self.flags,
            "histograms": {
                k: {"edges": e.tolist(), "counts": c.tolist()} for k, (e, c) in self.histograms.items()
            },
        }


def two_level_split(trace) -> tuple[float, float]:
    """Means of the low/high clusters: split at the mid-range, then re-split once at their midpoint."""
    x = np.asarray(trace, dtype=np.float64)
    cut = 0.5 * (x.min() + x.max())
    for _ in range(2):
        lo, hi = x[x <= cut], x[x > cut]
        if lo.size == 0 or hi.size == 0:
            raise ValueError("trace does not show two levels")
        levels = (float(lo.mean()), float(hi.mean()))
        cut = 0.5 * sum(levels)
    return levels


def analyze_fret(trace, dt: float, threshold: float | None = None) -> KineticsReport:
    """Two-state kinetics from a denoised trace.

    State 1 is the low level and state 2 the high level.  ``k12`` is the exit
    rate of state 1 (inverse mean dwell there), ``k21`` that of state 2.
    """
    x = np.asarray(trace, dtype=np.float64)
    levels = two_level_split(x)
    th = 0.5 * (levels[0] + levels[1]) if threshold is None else float(threshold)
    states = (x > th).astype(np.int64)
    d1, d2 = dwell_times(states, dt)
    flags = []
    rates = []
    for name, d in (("state1", d1), ("state2", d2)):
        if d.size < MIN_DWELLS:
            flags.append(f"too_few_dwells_{name}")
            rates.append(None)
        else:
            rates.append(fit_rate(d))
    return KineticsReport(
        levels=levels,
        threshold=th,
        k12=rates[0],
        k21=rates[1],
        n_dwells=(int(d1.size), int(d2.size)),
        mean_dwell=(float(d1.mean()) if d1.size else None, float(d2.mean()) if d2.size else None),
        flags=flags,
        histograms={"state1": dwell_histogram(d1), "state2": dwell_histogram(d2)},
    )


@dataclass(frozen=True)
class Event:
    start: int
    end: int
    duration: float
    amplitude: float


def extract_events(trace, baseline: float, threshold: float, dt: float, min_duration: int = 3) -> list[Event]:
    """Maximal runs on the far side of ``threshold`` from ``baseline``.

    ``end`` is exclusive; runs shorter than ``min_duration`` samples are dropped.
    """
    x = np.asarray(trace, dtype=np.float64)
    if threshold == baseline:
        raise ValueError("threshold must differ from the baseline")
    inside = x < threshold if threshold < baseline else x > threshold
    vals, lens = run_lengths(inside)
    events = []
    pos = 0
    for v, n in zip(vals, lens):
        if v and n >= min_duration:
            seg = x[pos : pos + n]
            events.append(Event(pos, pos + int(n), float(n * dt), float(abs(baseline - seg.mean()))))
        pos += int(n)
    return events
