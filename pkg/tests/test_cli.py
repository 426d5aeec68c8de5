import csv
import hashlib
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from dmp import bounds, cli, data
from dmp import network as nn
from dmp import trainer as tr
from dmp.manifold import covariance


def run(argv, capsys):
    try:
        code = cli.main([str(a) for a in argv])
    except SystemExit as exc:      # argparse usage errors
        code = exc.code
    out = capsys.readouterr()
    return code, out.out, out.err


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def dataset(tmp_path, capsys):
    out = tmp_path / "data"
    code, _, _ = run(["gen", "--out", out, "--classes", 3, "--dim", 6, "--per-class", 20, "--seed", 4], capsys)
    assert code == 0
    return out


TRAIN_FLAGS = ["--hidden", "8,6", "--batch-size", 10, "--t-max", 15, "--lr", "1e-3"]


def train_into(dataset, out, capsys, *extra):
    argv = ["train", "--source", dataset / "source.csv", "--target", dataset / "target.csv",
            "--target-labels", dataset / "target_labels.csv", "--out", out, *TRAIN_FLAGS, *extra]
    return run(argv, capsys)


def test_gen_outputs_and_determinism(tmp_path, dataset, capsys):
    for name in ("source.csv", "target.csv", "target_labels.csv", "config.json"):
        assert (dataset / name).exists()
    again = tmp_path / "again"
    run(["gen", "--out", again, "--classes", 3, "--dim", 6, "--per-class", 20, "--seed", 4], capsys)
    for name in ("source.csv", "target.csv", "target_labels.csv"):
        assert digest(dataset / name) == digest(again / name)
    src = data.load_features(dataset / "source.csv")
    ref, _, _ = data.generate(data.SyntheticSpec(n_classes=3, dim=6, n_per_class=20, seed=4))
    np.testing.assert_array_equal(src.features, ref.features)
    cfg = json.loads((dataset / "config.json").read_text())
    assert cfg["seed"] == 4 and cfg["n_classes"] == 3


def test_gen_binary_and_config_file(tmp_path, capsys):
    cfg = tmp_path / "spec.json"
    cfg.write_text(json.dumps({"n_classes": 2, "dim": 3, "n_per_class": 5, "seed": 1}))
    out = tmp_path / "b"
    code, stdout, _ = run(["gen", "--out", out, "--config", cfg, "--dim", 4, "--binary"], capsys)
    assert code == 0
    batch = data.load_features(out / "source.bin")
    assert batch.dim == 4 and batch.n == 10          # flag overrides the file
    assert stdout.splitlines()[0] == "source,10,4,2"


def test_gen_usage_errors(tmp_path, capsys):
    assert run(["gen", "--out", tmp_path / "x", "--partial-keep", 0], capsys)[0] == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": 1}))
    assert run(["gen", "--out", tmp_path / "x", "--config", bad], capsys)[0] == 1
    bad.write_text("{not json")
    assert run(["gen", "--out", tmp_path / "x", "--config", bad], capsys)[0] in (1, 2)
    assert run(["nonsense"], capsys)[0] == 1
    assert run(["gen"], capsys)[0] == 1


def test_env_seed(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("DMP_SEED", "4")
    out = tmp_path / "env"
    run(["gen", "--out", out, "--classes", 3, "--dim", 6, "--per-class", 20], capsys)
    assert json.loads((out / "config.json").read_text())["seed"] == 4
    monkeypatch.setenv("DMP_SEED", "four")
    assert run(["gen", "--out", out], capsys)[0] == 1


def test_train_outputs(tmp_path, dataset, capsys):
    out = tmp_path / "run"
    code, stdout, _ = train_into(dataset, out, capsys)
    assert code == 0
    lines = dict(line.split(",", 1) for line in stdout.splitlines())
    assert 0.0 <= float(lines["final_accuracy"]) <= 1.0
    weights = [float(w) for w in lines["class_weights"].split(",")]
    assert len(weights) == 3 and abs(sum(weights) - 1) < 1e-9
    log = list(csv.DictReader(io.StringIO((out / "log.csv").read_text())))
    assert len(log) == 15 and list(log[0]) == list(tr.LOG_COLUMNS)
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["hidden"] == [8, 6] and cfg["lambda2"] == 5e3


def test_train_is_byte_deterministic(tmp_path, dataset, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    train_into(dataset, a, capsys)
    train_into(dataset, b, capsys)
    for name in ("log.csv", "checkpoint.bin", "report.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_train_partial_mode_defaults(tmp_path, dataset, capsys):
    out = tmp_path / "p"
    code, _, _ = train_into(dataset, out, capsys, "--mode", "partial")
    assert code == 0
    cfg = json.loads((out / "config.json").read_text())
    assert (cfg["lambda1"], cfg["lambda2"], cfg["mode"]) == (10.0, 1.0, "partial")


def test_train_errors(tmp_path, dataset, capsys):
    assert train_into(dataset, tmp_path / "e", capsys, "--k", 9)[0] == 1
    argv = ["train", "--source", tmp_path / "missing.csv", "--target", dataset / "target.csv",
            "--out", tmp_path / "e"]
    assert run(argv, capsys)[0] == 2
    argv = ["train", "--source", dataset / "target.csv", "--target", dataset / "target.csv",
            "--out", tmp_path / "e"]
    assert run(argv, capsys)[0] == 2       # unlabelled source


def test_eval_matches_library(tmp_path, dataset, capsys):
    out = tmp_path / "run"
    train_into(dataset, out, capsys)
    code, stdout, _ = run(["eval", "--checkpoint", out / "checkpoint.bin", "--features", dataset / "target.csv",
                           "--labels", dataset / "target_labels.csv"], capsys)
    assert code == 0
    params = nn.load_checkpoint(out / "checkpoint.bin")
    target = data.load_features(dataset / "target.csv")
    labels, _ = data.load_labels(dataset / "target_labels.csv")
    ev = tr.evaluate(params, target.features, labels)
    first, rest = stdout.split("\n", 1)
    assert float(first.split(",")[1]) == ev.accuracy
    rows = list(csv.DictReader(io.StringIO(rest)))
    assert [int(r["count"]) for r in rows] == list(ev.confusion.sum(axis=1))
    report = dict(l.split(",", 1) for l in (out / "report.csv").read_text().splitlines())
    assert float(report["final_accuracy"]) == ev.accuracy


def test_eval_errors(tmp_path, dataset, capsys):
    out = tmp_path / "run"
    train_into(dataset, out, capsys)
    assert run(["eval", "--checkpoint", tmp_path / "nope.bin", "--features", dataset / "source.csv"], capsys)[0] == 2
    assert run(["eval", "--checkpoint", out / "checkpoint.bin", "--features", dataset / "target.csv"], capsys)[0] == 2
    code, _, _ = run(["eval", "--checkpoint", out / "checkpoint.bin", "--features", dataset / "source.csv"], capsys)
    assert code == 0      # labels stored in the feature file


def test_error_index_matches_bounds(tmp_path, dataset, capsys):
    code, stdout, _ = run(["error-index", "--source", dataset / "source.csv", "--target", dataset / "target.csv",
                           "--batch-size", 4], capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(stdout)))
    assert len(rows) == 5
    s = data.load_features(dataset / "source.csv").features
    t = data.load_features(dataset / "target.csv").features
    ls = np.sort(np.linalg.eigvalsh(covariance(s)))[::-1]
    lt = np.sort(np.linalg.eigvalsh(covariance(t)))[::-1]
    for row in rows:
        d = int(row["d_prime"])
        assert float(row["e_index"]) == pytest.approx(bounds.error_index_grassmann(ls, lt, d), rel=1e-9)
    assert sum(int(r["argmin"]) for r in rows) == 1
    assert [int(r["d_prime"]) for r in rows if int(r["reference"])] == [3]


def test_error_index_on_checkpoint_and_errors(tmp_path, dataset, capsys):
    out = tmp_path / "run"
    train_into(dataset, out, capsys)
    base = ["error-index", "--source", dataset / "source.csv", "--target", dataset / "target.csv",
            "--checkpoint", out / "checkpoint.bin"]
    code, stdout, _ = run(base + ["--layer", 1, "--metric", "affine"], capsys)
    assert code == 0 and "e_affine" in stdout.splitlines()[0]
    assert len(stdout.strip().splitlines()) == 1 + 5
    assert run(base + ["--layer", 2], capsys)[0] == 1
    assert run(base + ["--d-max", 8], capsys)[0] == 1      # layer 0 is 8 wide


def test_grad_check(tmp_path, capsys):
    code, stdout, _ = run(["grad-check", "--seeds", 2, "--out", tmp_path / "g.csv"], capsys)
    assert code == 0 and "grad_check,pass" in stdout
    rows = list(csv.DictReader(io.StringIO((tmp_path / "g.csv").read_text())))
    assert len(rows) == 2 * 6 and all(r["passed"] == "1" for r in rows)
    code, stdout, _ = run(["grad-check", "--seeds", 1, "--inject", "1e-2"], capsys)
    assert code == 3 and "grad_check,fail" in stdout


def test_bound_check(tmp_path, capsys):
    code, stdout, _ = run(["bound-check", "--trials", 10, "--out", tmp_path / "bc"], capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(stdout)))
    assert [r["check"] for r in rows] == ["projector", "grassmann", "affine"]
    assert all(r["passed"] == "1" for r in rows)
    assert (tmp_path / "bc" / "projector_trials.csv").exists()
    assert run(["bound-check", "--check", "projector", "--n", 10, "--trials", 2], capsys)[0] == 1
    assert run(["bound-check", "--check", "projector", "--delta", 0, "--trials", 2], capsys)[0] == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dmp.cli", "gen", "--out", str(tmp_path / "m"),
                           "--classes", "2", "--dim", "2", "--per-class", "3"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "dmp.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "bound-check" in proc.stdout


def test_zero_lambda_flags_match_library_baseline(tmp_path, dataset, capsys):
    out = tmp_path / "zero"
    assert train_into(dataset, out, capsys, "--lambda1", 0, "--lambda2", 0)[0] == 0
    s = data.load_features(dataset / "source.csv")
    t = data.load_features(dataset / "target.csv", data.TARGET)
    cfg = tr.TrainConfig(hidden=(8, 6), batch_size=10, t_max=15, lr=1e-3, lambda1=0.0, lambda2=0.0)
    params, _ = tr.train(cfg, s, t)
    assert digest(out / "checkpoint.bin") == hashlib.sha256(nn.checkpoint_bytes(params)).hexdigest()


def test_eval_perfect_fit(tmp_path, capsys):
    gen = tmp_path / "easy"
    run(["gen", "--out", gen, "--classes", 2, "--dim", 3, "--per-class", 30, "--separation", 40,
         "--rotation", 0, "--translation", 0, "--noise", 0.1], capsys)
    out = tmp_path / "run"
    argv = ["train", "--source", gen / "source.csv", "--target", gen / "target.csv", "--out", out,
            "--hidden", "8,6", "--batch-size", 10, "--t-max", 150, "--lr", "1e-2"]
    assert run(argv, capsys)[0] == 0
    code, stdout, _ = run(["eval", "--checkpoint", out / "checkpoint.bin", "--features", gen / "target.csv",
                           "--labels", gen / "target_labels.csv"], capsys)
    assert code == 0 and stdout.splitlines()[0] == "accuracy,1.0"
