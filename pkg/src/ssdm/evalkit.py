"""Scoring of denoised stepwise traces.

Amplitude accuracy is the MSE against ground truth.  Transition accuracy is
an F1 over transition points, found by thresholding both traces into states
and matching transitions one-to-one within a tolerance of ``delta`` samples.
The composite score is ``ln(F1 / MSE)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

THRESHOLDS: dict[int, tuple[float, ...]] = {
    2: (0.5,),
    3: (0.25, 0.75),
    4: (0.165, 0.5, 0.83),
}
DELTA = 2
F1_FLOOR = 1e-6
MSE_FLOOR = 1e-12


def thresholds_for(K: int) -> tuple[float, ...]:
    """Fixed thresholds for K = 2..4; level midpoints for other K."""
    if K in THRESHOLDS:
        return THRESHOLDS[K]
    if K < 2:
        raise ValueError("K must be >= 2")
    return tuple((i + 0.5) / (K - 1) for i in range(K - 1))


@dataclass
class EvalReport:
    mse: float
    precision: float
    recall: float
    f1: float
    score: float
    tp: int
    fp: int
    fn: int
    clamped: bool = False
    id: str = ""
    K: int | None = None
    snr: float | None = None
    method: str | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def mse(x_hat, x_gt) -> float:
    a = np.asarray(x_hat, dtype=np.float64)
    b = np.asarray(x_gt, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty traces")
    return float(np.mean((a - b) ** 2))


def assign_states(trace, thresholds: Sequence[float]) -> np.ndarray:
    th = np.asarray(thresholds, dtype=np.float64)
    # count of thresholds strictly below each value
    return np.searchsorted(th, np.asarray(trace, dtype=np.float64), side="left")


def detect_transitions(states) -> np.ndarray:
    s = np.asarray(states)
    return np.flatnonzero(s[1:] != s[:-1]) + 1


def _check_sorted(a: np.ndarray, name: str) -> None:
    if a.size > 1 and np.any(np.diff(a) <= 0):
        raise ValueError(f"{name} transitions must be sorted and duplicate-free")


def match_transitions(gt, pred, delta: int = DELTA) -> tuple[int, int, int]:
    """Maximum one-to-one matching of transitions with ``|t_gt - t_pred| <= delta``.

    Ground-truth points are visited in order and each takes the earliest
    still-unmatched prediction inside its window.  The windows are intervals
    whose both ends increase with ``t_gt``, for which this greedy choice is a
    maximum-cardinality matching.  Returns ``(TP, FP, FN)``.
    """
    gt = np.asarray(gt, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    _check_sorted(gt, "gt")
    _check_sorted(pred, "pred")
    tp = 0
    j = 0
    for g in gt:
        while j < pred.size and pred[j] < g - delta:
            j += 1
        if j < pred.size and pred[j] <= g + delta:
            tp += 1
            j += 1
    return tp, int(pred.size) - tp, int(gt.size) - tp


def f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall and F1; any 0/0 is taken as 0."""
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f


def score(f1_value: float, mse_value: float) -> tuple[float, bool]:
    """Return ``(ln(F1/MSE), clamped)`` with F1 >= 1e-6 and MSE >= 1e-12."""
    clamped = f1_value < F1_FLOOR or mse_value < MSE_FLOOR
    return math.log(max(f1_value, F1_FLOOR) / max(mse_value, MSE_FLOOR)), clamped


def evaluate_trace(x_hat, x_gt, K: int, delta: int = DELTA, **meta) -> EvalReport:
    th = thresholds_for(K)
    m = mse(x_hat, x_gt)
    gt_tr = detect_transitions(assign_states(x_gt, th))
    pr_tr = detect_transitions(assign_states(x_hat, th))
    tp, fp, fn = match_transitions(gt_tr, pr_tr, delta)
    p, r, f = f1(tp, fp, fn)
    sc, clamped = score(f, m)
    return EvalReport(m, p, r, f, sc, tp, fp, fn, clamped, K=K, **meta)


@dataclass
class DatasetReport:
    traces: list[EvalReport]
    score_mean: float
    score_pooled: float
    mse_mean: float
    f1_mean: float
    extra: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.traces)

    def summary(self) -> dict:
        return {
            "n_traces": self.n,
            "mse_mean": self.mse_mean,
            "f1_mean": self.f1_mean,
            "score_mean_of_traces": self.score_mean,
            "score_pooled": self.score_pooled,
            **self.extra,
        }


def aggregate(reports: Sequence[EvalReport], **extra) -> DatasetReport:
    if not reports:
        raise ValueError("cannot aggregate an empty report list")
    mse_mean = float(np.mean([r.mse for r in reports]))
    f1_mean = float(np.mean([r.f1 for r in reports]))
    pooled, _ = score(f1_mean, mse_mean)
    return DatasetReport(
        list(reports),
        float(np.mean([r.score for r in reports])),
        pooled,
        mse_mean,
        f1_mean,
        dict(extra),
    )


def evaluate_dataset(pairs: Iterable[tuple], delta: int = DELTA) -> DatasetReport:
    """``pairs`` holds ``(x_hat, x_gt, K)`` or ``(x_hat, x_gt, K, id)`` tuples."""
    reports = []
    for n, p in enumerate(pairs):
        x_hat, x_gt, K = p[:3]
        tid = str(p[3]) if len(p) > 3 else str(n)
        reports.append(evaluate_trace(x_hat, x_gt, int(K), delta, id=tid))
    if not reports:
        raise ValueError("evaluate_dataset needs at least one pair")
    return aggregate(reports)


CSV_COLUMNS = ("id", "K", "snr", "mse", "precision", "recall", "f1", "score")


def write_reports_csv(reports: Sequence[EvalReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = CSV_COLUMNS + (("method",) if any(r.method for r in reports) else ())
        w.writerow(cols)
        for r in reports:
            d = asdict(r)
            w.writerow(["" if d.get(c) is None else d[c] for c in cols])


def write_reports_json(report: DatasetReport, path: str | Path) -> None:
    doc = {"aggregate": report.summary(), "traces": [r.to_dict() for r in report.traces]}
    Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")
