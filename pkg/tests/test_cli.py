import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from ssdm.cli import EXIT_INVALID, EXIT_IO, EXIT_OK, EXIT_USAGE, main
from ssdm.nnet import TINY_CONFIG
from ssdm.sigsim import read_trace_csv, write_trace_csv
from ssdm.trainer import TrainConfig, fit, save_checkpoint


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory):
    rng = np.random.default_rng(0)
    data = np.repeat(rng.integers(0, 2, (8, 4)).astype(float), 16, axis=1)
    ck = fit(data, train_cfg=TrainConfig(epochs=1, batch=4), net_cfg=TINY_CONFIG)
    path = tmp_path_factory.mktemp("ck") / "tiny.ssdm"
    save_checkpoint(ck, path)
    return path


def _step_trace(path, n=300):
    x = np.repeat([0.0, 1.0, 0.0, 1.0], n // 4)
    write_trace_csv(path, x)
    return x


def test_generate_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        args = ["generate", "--catalog", "train", "--out", str(tmp_path / d), "--seed", "7", "--traces-per-matrix", "1", "--n", "100"]
        assert main(args) == EXIT_OK
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    assert len(files) == 36
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    rec = json.loads((tmp_path / "a" / "run_record.json").read_text())
    assert rec["seed"] == 7 and len(rec["config_sha256"]) == 64 and "numpy" in rec["versions"]


def test_eval_identical_files(tmp_path, capsys):
    _step_trace(tmp_path / "g.csv")
    _step_trace(tmp_path / "p.csv")
    assert main(["eval", "--pred", str(tmp_path / "p.csv"), "--gt", str(tmp_path / "g.csv"), "--k", "3"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["mse"] == 0 and doc["f1"] == 1 and doc["clamped"] is True


def test_corrupt_and_baselines(tmp_path):
    _step_trace(tmp_path / "clean.csv")
    assert main(["corrupt", "--in", str(tmp_path / "clean.csv"), "--out", str(tmp_path / "noisy.csv"), "--snr", "3", "--seed", "1"]) == EXIT_OK
    y = read_trace_csv(tmp_path / "noisy.csv")
    assert np.sqrt(np.mean((y - read_trace_csv(tmp_path / "clean.csv")) ** 2)) == pytest.approx(1 / 18, rel=0.2)
    assert (tmp_path / "noisy.csv.run.json").is_file()
    base = ["baseline", "--in", str(tmp_path / "noisy.csv"), "--gt", str(tmp_path / "clean.csv"), "--k", "2"]
    assert main(base[:1] + ["lowpass"] + base[1:] + ["--out", str(tmp_path / "lp.csv")]) == EXIT_OK
    assert main(base[:1] + ["hmm"] + base[1:] + ["--out", str(tmp_path / "hmm.csv")]) == EXIT_OK
    assert read_trace_csv(tmp_path / "hmm.csv").shape == y.shape


def test_denoise_and_analyze_with_checkpoint(tmp_path, tiny_ckpt):
    rng = np.random.default_rng(2)
    y = 3.0 + 2.0 * np.repeat([0.0, 1.0] * 15, 15) + rng.normal(0, 0.1, 450)
    write_trace_csv(tmp_path / "raw.csv", y)
    args = ["denoise", "--checkpoint", str(tiny_ckpt), "--in", str(tmp_path / "raw.csv"), "--out", str(tmp_path / "den.csv")]
    assert main(args) == EXIT_OK
    a = read_trace_csv(tmp_path / "den.csv")
    assert main(args) == EXIT_OK
    assert a.shape == y.shape and np.array_equal(a, read_trace_csv(tmp_path / "den.csv"))
    for mode in ("chain", "chain_mean"):
        assert main(args[:-1] + [str(tmp_path / f"{mode}.csv"), "--mode", mode]) == EXIT_OK
        assert read_trace_csv(tmp_path / f"{mode}.csv").shape == y.shape
    assert main(args + ["--mode", "ddim"]) == EXIT_USAGE
    out = tmp_path / "fret"
    assert main(["analyze", "fret", "--in", str(tmp_path / "raw.csv"), "--out", str(out), "--dt", "0.01"]) == EXIT_OK
    rep = json.loads((out / "fret_report.json").read_text())
    assert rep["k12"] == pytest.approx(1 / 0.15, rel=0.1)
    nano = tmp_path / "nano"
    x = np.ones(400)
    x[100:150] = 0.6
    write_trace_csv(tmp_path / "ev.csv", x)
    assert main(["analyze", "nanopore", "--in", str(tmp_path / "ev.csv"), "--out", str(nano), "--dt", "1e-4", "--baseline-level", "1.0", "--threshold", "0.8"]) == EXIT_OK
    rows = list(csv.DictReader(open(nano / "events.csv")))
    assert len(rows) == 1 and float(rows[0]["duration"]) == pytest.approx(5e-3)


def test_benchmark_rows(tmp_path, tiny_ckpt):
    out = tmp_path / "bench"
    args = ["benchmark", "--methods", "ssdm,lowpass,hmm", "--snr", "0.25,0.5,1,3,5", "--per-k", "1", "--checkpoint", str(tiny_ckpt), "--out", str(out)]
    assert main(args) == EXIT_OK
    rows = list(csv.DictReader(open(out / "benchmark.csv")))
    assert list(rows[0]) == ["method", "K", "snr", "mse_mean", "f1_mean", "score_mean_of_traces", "score_pooled", "n_traces"]
    keys = {(r["method"], float(r["snr"]), int(r["K"])) for r in rows}
    assert len(rows) == len(keys) == 3 * 5 * 3
    assert (out / "per_trace.csv").is_file() and (out / "run_record.json").is_file()


def test_train_command(tmp_path):
    assert main(["generate", "--catalog", "train", "--out", str(tmp_path / "d"), "--traces-per-matrix", "1", "--n", "64"]) == EXIT_OK
    args = ["train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "run"), "--epochs", "1", "--base-channels", "16", "--padded-len", "64"]
    assert main(args) == EXIT_OK
    assert (tmp_path / "run" / "last.ssdm").read_bytes()[:4] == b"SSDM"


def test_exit_codes(tmp_path):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["eval", "--pred", "x.csv"]) == EXIT_USAGE
    assert main(["eval", "--pred", str(tmp_path / "nope.csv"), "--gt", str(tmp_path / "nope.csv"), "--k", "2"]) == EXIT_IO
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps([{"id": "x", "K": 2, "rows": [[-1, 2], [1, -1]]}]))
    assert main(["generate", "--catalog", str(bad), "--out", str(tmp_path / "g")]) == EXIT_INVALID
    assert len({EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INVALID}) == 4


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "ssdm", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "benchmark" in r.stdout
