import csv
import math
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from flowrecon.cli import main
from flowrecon.engine import read_tensor, write_tensor
from flowrecon.operators import RadonOperator

TINY = """
problem.kind = cs
data.extent = 16
data.count = 40
data.test_count = 3
operator.m = 64
model.hidden = 4
model.cond_channels = 2
model.couplings = 1
conditioner.hidden = 8
train.lr = 0.001
train.epochs = 2
train.batch_size = 16
reconstruct.samples = 6
reconstruct.refine = 1.0
reconstruct.refine_iterations = 3
"""


def write_cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run_all(cfg, out, seed=None):
    extra = [] if seed is None else ["--seed", str(seed)]
    return [main([cmd, "--config", cfg, "--out", str(out)] + extra)
            for cmd in ("simulate", "train", "reconstruct", "evaluate")]


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(tmp, TINY)
    codes = run_all(cfg, tmp / "out")
    return tmp, cfg, codes


def test_pipeline_exit_codes_and_artifacts(pipeline_run):
    tmp, _, codes = pipeline_run
    assert codes == [0, 0, 0, 0]
    out = tmp / "out"
    for rel in ("data/x.frt", "data/y.frt", "data/manifest.json", "checkpoint/params.frt",
                "history.csv", "recon/mean.frt", "recon/std.frt", "recon/initial.frt",
                "recon/refined.frt", "recon/preview/scaling.txt", "metrics.csv", "summary.csv"):
        assert (out / rel).exists(), rel
    assert read_tensor(out / "recon/mean.frt").shape == (3, 16, 16)


def test_pgm_preview_scaling(pipeline_run):
    prev = pipeline_run[0] / "out/recon/preview"
    raw = (prev / "mean_000.pgm").read_bytes()
    assert raw.startswith(b"P5\n16 16\n255\n") and len(raw) == len(b"P5\n16 16\n255\n") + 256
    pixels = np.frombuffer(raw[-256:], np.uint8)
    assert pixels.min() == 0 and pixels.max() == 255
    line = next(l for l in (prev / "scaling.txt").read_text().splitlines()
                if l.startswith("mean_000.pgm"))
    lo, hi = map(float, line.split()[1:])
    mean = read_tensor(pipeline_run[0] / "out/recon/mean.frt")[0]
    assert lo == mean.min() and hi == mean.max()


def test_aggregate_is_mean_of_rows(pipeline_run):
    out = pipeline_run[0] / "out"
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    summary = {r["metric"]: r for r in csv.DictReader(open(out / "summary.csv"))}
    for metric in ("psnr", "ssim"):
        vals = np.array([float(r[metric]) for r in rows])
        assert float(summary[metric]["mean"]) == pytest.approx(vals.mean(), rel=1e-12)
        assert float(summary[metric]["std"]) == pytest.approx(vals.std(), rel=1e-9)


def test_seed_changes_outputs(pipeline_run, tmp_path):
    _, cfg, _ = pipeline_run
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path), "--seed", "5"]) == 0
    a = read_tensor(pipeline_run[0] / "out/data/x.frt")
    b = read_tensor(tmp_path / "data/x.frt")
    assert not np.array_equal(a, b)


def test_evaluate_identical_files(tmp_path, rng):
    ref = rng.uniform(size=(3, 16, 16))
    write_tensor(tmp_path / "a.frt", ref)
    cfg = write_cfg(tmp_path, f"evaluate.reconstructions = {tmp_path / 'a.frt'}\n"
                              f"evaluate.references = {tmp_path / 'a.frt'}\n")
    assert main(["evaluate", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert all(r["psnr"] == "inf" and float(r["ssim"]) == 1.0 for r in rows)


def test_evaluate_count_mismatch_is_io_error(tmp_path, rng, capsys):
    write_tensor(tmp_path / "a.frt", rng.uniform(size=(3, 16, 16)))
    write_tensor(tmp_path / "b.frt", rng.uniform(size=(2, 16, 16)))
    cfg = write_cfg(tmp_path, f"evaluate.reconstructions = {tmp_path / 'a.frt'}\n"
                              f"evaluate.references = {tmp_path / 'b.frt'}\n")
    assert main(["evaluate", "--config", cfg, "--out", str(tmp_path)]) == 3
    assert "3 reconstructions but 2 references" in capsys.readouterr().err


def test_unknown_key_is_usage_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "model.hiden = 3\n")
    assert main(["train", "--config", cfg]) == 1
    assert "model.hiden" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["fly", "--config", "x"], ["train"],
                                  ["train", "--config", "x", "--seed", "-1"],
                                  ["train", "--config", "x", "--seed", str(2 ** 64)]])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1


def test_missing_files_are_io_errors(tmp_path):
    assert main(["train", "--config", str(tmp_path / "none.cfg")]) == 3
    cfg = write_cfg(tmp_path, TINY)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "empty")]) == 3


def test_thread_cap_validation(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, "problem.kind = cs\ndata.count = 4\ndata.test_count = 1\n"
                              "data.extent = 8\n")
    monkeypatch.setenv("FLOWRECON_THREADS", "zero")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 1
    monkeypatch.setenv("FLOWRECON_THREADS", "1")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0


def test_unstable_training_exits_numerical(tmp_path):
    cfg = write_cfg(tmp_path, TINY.replace("train.epochs = 2", "train.epochs = 1")
                    + "train.roundtrip_threshold = -1\n")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_cs_dimensions(tmp_path):
    cfg = write_cfg(tmp_path, "problem.kind = cs\ndata.extent = 28\ndata.count = 200\n"
                              "data.test_count = 10\ndata.generator = digits-like\n")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert read_tensor(tmp_path / "data/y.frt").shape == (200, 196)
    assert read_tensor(tmp_path / "data/x.frt").shape == (200, 28, 28)


def test_noise_free_ct_is_exact_radon(tmp_path):
    cfg = write_cfg(tmp_path, "problem.kind = ct\ndata.extent = 16\ndata.count = 3\n"
                              "data.test_count = 1\noperator.noise = none\noperator.angles = 12\n")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0
    x, y = read_tensor(tmp_path / "data/x.frt"), read_tensor(tmp_path / "data/y.frt")
    np.testing.assert_array_equal(y, RadonOperator((16, 16), 12).forward(x))


def test_mri_writes_mask(tmp_path):
    cfg = write_cfg(tmp_path, "problem.kind = mri\ndata.extent = 32\ndata.count = 3\n"
                              "data.test_count = 1\n")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0
    mask = (tmp_path / "data/mask.txt").read_text().strip()
    assert len(mask) == 32 and mask.count("1") == 8
    assert read_tensor(tmp_path / "data/y.frt").shape == (3, 2, 32, 8)


def test_toy2d_run_reports_nll(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "problem.kind = toy2d\ndata.count = 400\ndata.test_count = 10\n"
                              "model.scales = 1\nmodel.couplings = 4\nmodel.hidden = 16\n"
                              "train.lr = 0.002\ntrain.epochs = 3\ntrain.batch_size = 64\n"
                              "reconstruct.samples = 50\n")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    nll = float(out.split("final validation NLL ")[1].split()[0])
    assert math.isfinite(nll)
    assert main(["reconstruct", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert read_tensor(tmp_path / "recon/samples.frt").shape == (50, 2)


def test_console_entry_point(tmp_path):
    env = dict(os.environ, FLOWRECON_THREADS="1")
    proc = subprocess.run([sys.executable, "-m", "flowrecon.cli", "evaluate", "--config",
                           str(Path(tmp_path) / "missing.cfg")], capture_output=True, text=True,
                          env=env)
    assert proc.returncode == 3 and "input/output error" in proc.stderr
