"""Stepwise signal simulation from continuous-time Markov chains.

A trace is produced by running a Gillespie simulation of the chain and
sampling the resulting piecewise-constant path on a regular grid.  Each state
``i`` of a ``K``-state chain sits at the normalized level ``i / (K - 1)``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ROW_SUM_ATOL = 1e-9
MIN_STATES, MAX_STATES = 2, 6


class RateMatrixError(ValueError):
    """Raised when a rate matrix violates a structural invariant."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


@dataclass(frozen=True)
class RateMatrix:
    entries: np.ndarray
    id: str = ""

    @property
    def K(self) -> int:
        return int(self.entries.shape[0])

    @property
    def escape_rates(self) -> np.ndarray:
        return -np.diag(self.entries)

    @property
    def mean_dwell(self) -> np.ndarray:
        return 1.0 / self.escape_rates

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]], id: str = "") -> "RateMatrix":
        m = cls(np.asarray(rows, dtype=np.float64), id=id)
        validate_rate_matrix(m)
        return m


def validate_rate_matrix(M: RateMatrix | np.ndarray | Sequence[Sequence[float]]) -> None:
    """Raise :class:`RateMatrixError` unless ``M`` is a valid generator matrix."""
    a = np.asarray(M.entries if isinstance(M, RateMatrix) else M, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise RateMatrixError(f"rate matrix must be square, got shape {a.shape}")
    K = a.shape[0]
    if not MIN_STATES <= K <= MAX_STATES:
        raise RateMatrixError(f"state count K={K} outside [{MIN_STATES}, {MAX_STATES}]")
    if not np.all(np.isfinite(a)):
        raise RateMatrixError("rate matrix contains non-finite entries")
    for i in range(K):
        if a[i, i] >= 0:
            raise RateMatrixError(f"diagonal must be negative (row {i}: {a[i, i]})", row=i)
        off = np.delete(a[i], i)
        if np.any(off < 0):
            raise RateMatrixError(f"negative off-diagonal entry in row {i}", row=i)
        s = a[i].sum()
        if abs(s) > ROW_SUM_ATOL:
            raise RateMatrixError(f"row {i} sums to {s:.6g}, expected 0", row=i)


@dataclass(frozen=True)
class StatePath:
    states: np.ndarray

    @property
    def N(self) -> int:
        return int(self.states.shape[0])


@dataclass(frozen=True)
class StepwiseTrace:
    values: np.ndarray
    path: StatePath
    K: int

    @property
    def levels(self) -> np.ndarray:
        return np.arange(self.K) / (self.K - 1)


def simulate_ctmc(
    M: RateMatrix,
    N: int = 1000,
    dt: float = 1.0,
    seed: int | np.random.Generator = 0,
    initial_state: int | None = None,
) -> StatePath:
    """Gillespie simulation of ``M`` sampled-and-held on ``{0, dt, ..., (N-1) dt}``.

    The initial state is uniform over the ``K`` states unless given.
    """
    if N < 2:
        raise ValueError("N must be >= 2")
    if dt <= 0:
        raise ValueError("dt must be positive")
    validate_rate_matrix(M)
    rng = np.random.default_rng(seed)
    a = M.entries
    K = M.K
    rates = -np.diag(a)
    jump = a / rates[:, None]
    np.fill_diagonal(jump, 0.0)

    state = int(rng.integers(K)) if initial_state is None else int(initial_state)
    t_end = (N - 1) * dt
    # Jump times and the states entered at those times.
    times = [0.0]
    visited = [state]
    t = 0.0
    while True:
        t += rng.exponential(1.0 / rates[state])
        if t > t_end:
            break
        state = int(rng.choice(K, p=jump[state]))
        times.append(t)
        visited.append(state)
    grid = np.arange(N) * dt
    idx = np.searchsorted(np.asarray(times), grid, side="right") - 1
    return StatePath(np.asarray(visited, dtype=np.int64)[idx])


def simulate_dwells(
    M: RateMatrix, n_jumps: int, seed: int | np.random.Generator = 0, initial_state: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Run the embedded jump chain for ``n_jumps`` jumps without a time grid.

    Returns ``(states, dwells)`` where ``dwells[j]`` is the holding time spent in
    ``states[j]`` before the next jump.  Used for convergence checks of the
    simulator's dwell and jump statistics.
    """
    validate_rate_matrix(M)
    rng = np.random.default_rng(seed)
    a = M.entries
    K = M.K
    rates = -np.diag(a)
    jump = a / rates[:, None]
    np.fill_diagonal(jump, 0.0)
    states = np.empty(n_jumps + 1, dtype=np.int64)
    dwells = np.empty(n_jumps + 1)
    s = initial_state
    for j in range(n_jumps + 1):
        states[j] = s
        dwells[j] = rng.exponential(1.0 / rates[s])
        s = int(rng.choice(K, p=jump[s]))
    return states, dwells


def levels_from_path(path: StatePath, K: int) -> StepwiseTrace:
    if K < 2:
        raise ValueError("K must be >= 2")
    states = np.asarray(path.states)
    if states.size and (states.min() < 0 or states.max() >= K):
        raise ValueError(f"path contains states outside [0, {K})")
    return StepwiseTrace(states / (K - 1), path, K)


# -- catalogs and datasets -------------------------------------------------


def load_catalog(source: str | Path) -> list[RateMatrix]:
    """Load a catalog by built-in name (``train``/``test``) or JSON path."""
    if str(source) in ("train", "test"):
        text = resources.files("ssdm.data").joinpath(f"{source}_catalog.json").read_text("utf-8")
    else:
        text = Path(source).read_text(encoding="utf-8")
    out = []
    for item in json.loads(text):
        m = RateMatrix.from_rows(item["rows"], id=str(item["id"]))
        if "K" in item and int(item["K"]) != m.K:
            raise RateMatrixError(f"{item['id']}: K={item['K']} does not match matrix size {m.K}")
        out.append(m)
    return out


def save_catalog(catalog: Iterable[RateMatrix], path: str | Path) -> None:
    items = [{"id": m.id, "K": m.K, "rows": m.entries.tolist()} for m in catalog]
    Path(path).write_text(json.dumps(items, indent=1), encoding="utf-8")


@dataclass
class ManifestEntry:
    matrix_id: str
    K: int
    noise: str | None
    snr: float | None
    seed: int
    n_traces: int
    files: list[str]
    noisy_files: list[str] = field(default_factory=list)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    N: int = 1000
    dt: float = 1.0
    root: str = "."

    def to_json(self) -> str:
        return json.dumps(
            {
                "N": self.N,
                "dt": self.dt,
                "entries": [e.__dict__ for e in self.entries],
            },
            indent=1,
        )

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        entries = [ManifestEntry(**e) for e in doc["entries"]]
        return cls(entries, N=doc["N"], dt=doc["dt"], root=str(path.parent))

    def __len__(self) -> int:
        return sum(e.n_traces for e in self.entries)

    def iter_traces(self, noisy: bool = False):
        """Yield ``(entry, clean_values, noisy_values_or_None)`` for every stored trace."""
        root = Path(self.root)
        for e in self.entries:
            for i, f in enumerate(e.files):
                clean = read_trace_csv(root / f)
                y = read_trace_csv(root / e.noisy_files[i]) if noisy and e.noisy_files else None
                yield e, clean, y


def write_trace_csv(path: str | Path, values: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "value"])
        for i, v in enumerate(np.asarray(values, dtype=np.float64)):
            w.writerow([i, repr(float(v))])


def read_trace_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        col = header.index("value") if "value" in header else len(header) - 1
        return np.array([float(row[col]) for row in r if row], dtype=np.float64)


def _entry_seed(base: int, *keys: int) -> int:
    return int(np.random.SeedSequence([base, *keys]).generate_state(1)[0])


def generate_traces(
    M: RateMatrix, n_traces: int, N: int = 1000, dt: float = 1.0, seed: int = 0
) -> list[StepwiseTrace]:
    children = np.random.SeedSequence(seed).spawn(n_traces)
    return [
        levels_from_path(simulate_ctmc(M, N, dt, np.random.default_rng(c)), M.K)
        for c in children
    ]


def build_dataset(
    catalog: Sequence[RateMatrix],
    traces_per_matrix: int,
    out_dir: str | Path | None,
    N: int = 1000,
    dt: float = 1.0,
    seed: int = 0,
    snr_levels: Sequence[float] | None = None,
    noise: str = "white",
) -> DatasetManifest:
    """Simulate ``traces_per_matrix`` traces per matrix (per SNR level if given).

    With ``snr_levels`` each (matrix, SNR) pair becomes one manifest entry
    holding clean traces and their noisy copies.  ``out_dir=None`` builds the
    manifest without touching the file system (file lists stay empty).
    """
    from .noisegen import NoiseSpec, corrupt

    for m in catalog:
        validate_rate_matrix(m)
    manifest = DatasetManifest(N=N, dt=dt, root=str(out_dir) if out_dir is not None else ".")
    if traces_per_matrix <= 0:
        return manifest
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "clean").mkdir(parents=True, exist_ok=True)
    levels = list(snr_levels) if snr_levels is not None else [None]
    for mi, m in enumerate(catalog):
        for si, snr in enumerate(levels):
            eseed = _entry_seed(seed, mi, si)
            traces = generate_traces(m, traces_per_matrix, N, dt, eseed)
            tag = m.id or f"m{mi:03d}"
            stem = tag if snr is None else f"{tag}_snr{snr:g}"
            files, noisy_files = [], []
            noise_seeds = np.random.SeedSequence([eseed, 1]).generate_state(traces_per_matrix)
            for ti, tr in enumerate(traces):
                if out is None:
                    continue
                f = f"clean/{stem}_{ti:04d}.csv"
                write_trace_csv(out / f, tr.values)
                files.append(f)
                if snr is not None:
                    (out / "noisy").mkdir(exist_ok=True)
                    y = corrupt(tr, NoiseSpec(noise, float(snr), int(noise_seeds[ti])))
                    nf = f"noisy/{stem}_{ti:04d}.csv"
                    write_trace_csv(out / nf, y)
                    noisy_files.append(nf)
            manifest.entries.append(
                ManifestEntry(
                    matrix_id=tag,
                    K=m.K,
                    noise=None if snr is None else noise,
                    snr=None if snr is None else float(snr),
                    seed=eseed,
                    n_traces=traces_per_matrix,
                    files=files,
                    noisy_files=noisy_files,
                )
            )
    if out is not None:
        (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest
