"""Command-line entry point: ``ssdm <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("ssdm")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_INVALID = 4
EXIT_NUMERIC = 5


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _write_record(args: argparse.Namespace, target: Path, extra: dict | None = None) -> None:
    """Reproducibility record: argv, seed, config hash and library versions."""
    import scipy
    import torch

    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    blob = json.dumps(cfg, sort_keys=True, default=str)
    rec = {
        "command": args.command,
        "argv": sys.argv[1:],
        "seed": getattr(args, "seed", None),
        "config": cfg,
        "config_sha256": hashlib.sha256(blob.encode()).hexdigest(),
        "versions": {
            "ssdm": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "torch": torch.__version__,
        },
        **(extra or {}),
    }
    target = Path(target)
    path = target / "run_record.json" if target.is_dir() else target.with_name(target.name + ".run.json")
    path.write_text(json.dumps(rec, indent=1, default=str), encoding="utf-8")


def _read(path) -> np.ndarray:
    from .sigsim import read_trace_csv

    return read_trace_csv(path)


def _write(path, values) -> None:
    from .sigsim import write_trace_csv

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_trace_csv(path, values)


def _infer_k(clean: np.ndarray) -> int:
    return max(2, int(np.unique(np.round(clean, 9)).size))


# -- subcommands ----------------------------------------------------------


def cmd_generate(args) -> int:
    from .sigsim import build_dataset, load_catalog

    catalog = load_catalog(args.catalog)
    out = Path(args.out)
    manifest = build_dataset(
        catalog,
        args.traces_per_matrix,
        out,
        N=args.n,
        dt=args.dt,
        seed=args.seed,
        snr_levels=args.snr,
        noise=args.noise,
    )
    out.mkdir(parents=True, exist_ok=True)
    _write_record(args, out, {"n_traces": len(manifest)})
    print(f"wrote {len(manifest)} traces to {out}")
    return EXIT_OK


def cmd_corrupt(args) -> int:
    from .noisegen import NoiseSpec, corrupt
    from .sigsim import StatePath, StepwiseTrace

    clean = _read(args.input)
    K = args.k or _infer_k(clean)
    states = np.rint(clean * (K - 1)).astype(np.int64)
    if len(args.snr) != 1:
        raise ValueError("corrupt takes a single --snr value")
    y = corrupt(StepwiseTrace(clean, StatePath(states), K), NoiseSpec(args.noise, args.snr[0], args.seed))
    _write(args.out, y)
    _write_record(args, Path(args.out))
    return EXIT_OK


def _load_clean_dataset(path: Path) -> np.ndarray:
    from .sigsim import DatasetManifest

    man = DatasetManifest.load(path / "manifest.json" if path.is_dir() else path)
    return np.stack([clean for _, clean, _ in man.iter_traces()])


def cmd_train(args) -> int:
    from .nnet import NetConfig
    from .pipeline import desk_training_set
    from .trainer import LossConfig, TrainConfig, fit, load_checkpoint

    if args.data:
        data = _load_clean_dataset(Path(args.data))
    else:
        data = desk_training_set(args.per_k, seed=args.seed)
    net_cfg = NetConfig(base_channels=args.base_channels, input_len=data.shape[1], padded_len=args.padded_len)
    train_cfg = TrainConfig(epochs=args.epochs, batch=args.batch, lr0=args.lr0, lr_min=args.lr_min, seed=args.seed)
    loss_cfg = LossConfig(args.lambda_amp, args.lambda_edge, args.edge_mode)
    resume = load_checkpoint(args.checkpoint) if args.checkpoint else None
    ckpt = fit(data, train_cfg=train_cfg, loss_cfg=loss_cfg, net_cfg=net_cfg, out_dir=args.out, resume=resume)
    _write_record(args, Path(args.out), {"loss_history": ckpt.loss_history})
    print(json.dumps({"epochs": ckpt.epoch, "final_loss": ckpt.loss_history[-1] if ckpt.loss_history else None}))
    return EXIT_OK


def _denoiser(path, mode: str = "single"):
    from .pipeline import SSDMDenoiser
    from .trainer import load_checkpoint

    return SSDMDenoiser.from_checkpoint(load_checkpoint(path), mode=mode)


def cmd_denoise(args) -> int:
    y = _read(args.input)
    den = _denoiser(args.checkpoint, args.mode)
    if args.normalized:
        x = den.denoise_normalized([y], args.t_start, args.seed)[0]
    else:
        x, _, _ = den.denoise_raw(y, args.t_start, args.seed)
    _write(args.out, x)
    _write_record(args, Path(args.out))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalkit import evaluate_trace

    pred, gt = _read(args.pred), _read(args.gt)
    rep = evaluate_trace(pred, gt, args.k, delta=args.delta, id=Path(args.pred).stem)
    doc = rep.to_dict()
    text = json.dumps(doc, indent=1)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        _write_record(args, Path(args.out))
    print(text)
    return EXIT_OK


def cmd_baseline(args) -> int:
    from . import baselines
    from .evalkit import evaluate_trace

    y = _read(args.input)
    info: dict = {"method": args.method}
    if args.method == "lowpass":
        if args.fc is not None:
            fc = args.fc
        elif args.gt:
            gt = _read(args.gt)
            gs = baselines.grid_search_cutoff([y], [gt], [args.k or _infer_k(gt)], baselines.LowpassConfig(phase_mode=args.phase))
            fc = gs.best_fc
            info["candidates"] = {str(f): r.score_mean for f, r in gs.reports.items()}
        else:
            raise ValueError("lowpass needs --fc or --gt for the cutoff grid search")
        x = baselines.butterworth_lowpass(y, fc, 4, args.phase)
        info["fc"] = fc
    else:
        x, sel = baselines.hmm_baseline(y)
        info["K"] = sel.K
        info["bic"] = {str(k): v for k, v in sel.bic_table.items()}
    if args.gt:
        gt = _read(args.gt)
        rep = evaluate_trace(x, gt, args.k or _infer_k(gt), method=args.method)
        info["report"] = rep.to_dict()
    _write(args.out, x)
    _write_record(args, Path(args.out), info)
    print(json.dumps(info, indent=1))
    return EXIT_OK


def cmd_benchmark(args) -> int:
    from .evalkit import write_reports_csv
    from .pipeline import BENCH_COLUMNS, benchmark

    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    denoiser = _denoiser(args.checkpoint, args.mode) if "ssdm" in methods else None
    rows, reports = benchmark(methods, args.snr, per_k=args.per_k, denoiser=denoiser, noise=args.noise, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "benchmark.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    # per-trace table: plot data for score-vs-SNR box charts
    write_reports_csv(reports, out / "per_trace.csv")
    _write_record(args, out)
    print(f"wrote {len(rows)} rows to {out / 'benchmark.csv'}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analysis import analyze_fret, extract_events, normalize_trace

    y = _read(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        x, xn, rec = _denoiser(args.checkpoint, args.mode).denoise_raw(y, args.t_start, args.seed)
        _write(out / "denoised.csv", x)
    else:
        x = y
        xn, rec = normalize_trace(y)
    if args.kind == "fret":
        rep = analyze_fret(x, args.dt, args.threshold)
        doc = rep.to_dict()
    else:
        baseline = args.baseline_level if args.baseline_level is not None else float(np.median(x))
        if args.threshold is None:
            raise ValueError("nanopore analysis needs --threshold")
        events = extract_events(x, baseline, args.threshold, args.dt, args.min_duration)
        doc = {"baseline": baseline, "threshold": args.threshold, "n_events": len(events)}
        with open(out / "events.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["start", "end", "duration", "amplitude"])
            for e in events:
                w.writerow([e.start, e.end, repr(e.duration), repr(e.amplitude)])
    (out / f"{args.kind}_report.json").write_text(json.dumps(doc, indent=1), encoding="utf-8")
    _write_record(args, out, {"normalization": [rec.low, rec.high]})
    print(json.dumps(doc, indent=1))
    return EXIT_OK


# -- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssdm", description="Stepwise signal diffusion denoising toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=0):
        sp.add_argument("--seed", type=int, default=seed)
        return sp

    g = common(sub.add_parser("generate", help="simulate a dataset from a rate-matrix catalog"))
    g.add_argument("--catalog", default="train", help="train, test or a catalog JSON path")
    g.add_argument("--out", required=True)
    g.add_argument("--traces-per-matrix", type=int, default=100)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--dt", type=float, default=1.0)
    g.add_argument("--snr", type=_floats, default=None, help="comma-separated SNR levels for noisy copies")
    g.add_argument("--noise", choices=("white", "pink"), default="white")
    g.set_defaults(func=cmd_generate)

    c = common(sub.add_parser("corrupt", help="add calibrated noise to a clean trace"))
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--snr", type=_floats, required=True)
    c.add_argument("--noise", choices=("white", "pink"), default="white")
    c.add_argument("--k", type=int, default=None)
    c.set_defaults(func=cmd_corrupt)

    t = common(sub.add_parser("train", help="train the noise predictor"))
    t.add_argument("--data", default=None, help="dataset directory/manifest; default: desk training set")
    t.add_argument("--per-k", type=int, default=200)
    t.add_argument("--out", required=True)
    t.add_argument("--checkpoint", default=None, help="resume from this checkpoint")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--lr0", type=float, default=7.61e-5)
    t.add_argument("--lr-min", type=float, default=1e-6)
    t.add_argument("--base-channels", type=int, default=32)
    t.add_argument("--padded-len", type=int, default=1024)
    t.add_argument("--lambda-amp", type=float, default=14.53)
    t.add_argument("--lambda-edge", type=float, default=8.95)
    t.add_argument("--edge-mode", choices=("magnitude", "literal"), default="magnitude")
    t.set_defaults(func=cmd_train)

    d = common(sub.add_parser("denoise", help="denoise a trace with a trained checkpoint"))
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--t-start", type=int, default=None)
    d.add_argument("--mode", choices=("single", "chain", "chain_mean"), default="single", help="inference mode (see README)")
    d.add_argument("--normalized", action="store_true", help="input is already on the [0, 1] level scale")
    d.set_defaults(func=cmd_denoise)

    e = sub.add_parser("eval", help="score a denoised trace against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--k", type=int, required=True)
    e.add_argument("--delta", type=int, default=2)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    b = common(sub.add_parser("baseline", help="low-pass or HMM baseline"))
    b.add_argument("method", choices=("lowpass", "hmm"))
    b.add_argument("--in", dest="input", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--gt", default=None)
    b.add_argument("--k", type=int, default=None)
    b.add_argument("--fc", type=float, default=None)
    b.add_argument("--phase", choices=("causal", "zero_phase"), default="zero_phase")
    b.set_defaults(func=cmd_baseline)

    m = common(sub.add_parser("benchmark", help="score methods over the test catalog at several SNRs"), seed=1)
    m.add_argument("--methods", default="ssdm,lowpass,hmm")
    m.add_argument("--snr", type=_floats, default=[0.25, 0.5, 1.0, 3.0, 5.0])
    m.add_argument("--noise", choices=("white", "pink"), default="white")
    m.add_argument("--per-k", type=int, default=50)
    m.add_argument("--checkpoint", default=None)
    m.add_argument("--mode", choices=("single", "chain", "chain_mean"), default="single", help="inference mode (see README)")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_benchmark)

    a = common(sub.add_parser("analyze", help="kinetics (fret) or event (nanopore) analysis"))
    a.add_argument("kind", choices=("fret", "nanopore"))
    a.add_argument("--in", dest="input", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--dt", type=float, required=True)
    a.add_argument("--checkpoint", default=None, help="denoise with this checkpoint first")
    a.add_argument("--t-start", type=int, default=None)
    a.add_argument("--mode", choices=("single", "chain", "chain_mean"), default="single", help="inference mode (see README)")
    a.add_argument("--threshold", type=float, default=None)
    a.add_argument("--baseline-level", type=float, default=None)
    a.add_argument("--min-duration", type=int, default=3)
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "benchmark" and "ssdm" in args.methods and not args.checkpoint:
        parser.print_usage(sys.stderr)
        print("ssdm: error: benchmark with ssdm needs --checkpoint", file=sys.stderr)
        return EXIT_USAGE
    from .diffusion import NonFiniteError
    from .trainer import NonFiniteLossError

    try:
        return args.func(args)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"ssdm: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteError, NonFiniteLossError, FloatingPointError) as exc:
        print(f"ssdm: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"ssdm: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
