import json
import subprocess
import sys

import numpy as np
import pytest

from delta_uq import artifacts
from delta_uq.cli import main
from delta_uq.calibration import TC_GRID


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def toy(tmp_path, capsys):
    """Synthetic data, a trained model and its posterior."""
    d = tmp_path
    assert run(capsys, "synth", "--out", d / "toy.npz", "--n-samples", 400, "--seed", 2)[0] == 0
    assert run(capsys, "train", "--data", d / "toy.npz", "--hidden", "6", "--epochs", 5, "--lr", 1e-2, "--out", d / "m.duq")[0] == 0
    assert run(capsys, "covariance", "--data", d / "toy.npz", "--model", d / "m.duq", "--layers", 2, "--out", d / "p.duq")[0] == 0
    return d


def test_pipeline_and_artifacts_parse(toy, capsys):
    code, out, _ = run(capsys, "predict", "--data", toy / "toy.npz", "--model", toy / "m.duq", "--posterior", toy / "p.duq",
                       "--samples", 50, "--seed", 1, "--out", toy / "f.duq")
    assert code == 0
    model = artifacts.load_model(toy / "m.duq")
    post = artifacts.load_posterior(toy / "p.duq")
    pred = artifacts.load_prediction(toy / "f.duq")
    assert post.dim == model.n_trailing(2) and post.n_samples_processed == 400
    assert post.prior_precision == pytest.approx(1e-4 * 400)
    assert pred.pmf.shape == (400, 3) and (pred.K, pred.seed) == (50, 1)
    np.testing.assert_allclose(pred.pmf.sum(axis=1), 1.0, atol=1e-12)


def test_stages_are_byte_identical_on_rerun(toy, capsys):
    base = ["--data", toy / "toy.npz"]
    run(capsys, "train", *base, "--hidden", "6", "--epochs", 5, "--lr", 1e-2, "--out", toy / "m2.duq")
    assert (toy / "m.duq").read_bytes() == (toy / "m2.duq").read_bytes()
    run(capsys, "covariance", *base, "--model", toy / "m.duq", "--out", toy / "p2.duq")
    assert (toy / "p.duq").read_bytes() == (toy / "p2.duq").read_bytes()
    for name in ("a", "b"):
        run(capsys, "predict", *base, "--model", toy / "m.duq", "--posterior", toy / "p.duq", "--samples", 30, "--out", toy / name)
    assert (toy / "a").read_bytes() == (toy / "b").read_bytes()


def test_recursive_method_matches_direct(toy, capsys):
    code, _, _ = run(capsys, "covariance", "--data", toy / "toy.npz", "--model", toy / "m.duq", "--method", "recursive",
                     "--block-size", 8, "--out", toy / "pr.duq")
    assert code == 0
    a, b = artifacts.load_posterior(toy / "p.duq").P, artifacts.load_posterior(toy / "pr.duq").P
    assert np.linalg.norm(a - b) / np.linalg.norm(a) < 1e-8


def test_risk_output(toy, capsys):
    run(capsys, "predict", "--data", toy / "toy.npz", "--model", toy / "m.duq", "--posterior", toy / "p.duq",
        "--samples", 200, "--out", toy / "f.duq")
    code, out, _ = run(capsys, "risk", "--prediction", toy / "f.duq", "--class", 1, "--threshold", 1)
    assert (code, out) == (0, "0.000000\n")
    code, out, _ = run(capsys, "risk", "--prediction", toy / "f.duq", "--class", 3, "--threshold", 0, "--index", 5)
    assert (code, out) == (0, "1.000000\n")
    assert run(capsys, "risk", "--prediction", toy / "f.duq", "--class", 4, "--threshold", 0.5)[0] == 2
    assert run(capsys, "risk", "--prediction", toy / "f.duq", "--class", 0, "--threshold", 0.5)[0] == 2


def test_fuse_modes(toy, capsys):
    common = ["--model", toy / "m.duq", "--posterior", toy / "p.duq", "--samples", 100]
    run(capsys, "predict", "--data", toy / "toy.npz", *common, "--out", toy / "f.duq")
    assert run(capsys, "fuse", "--mode", "classifiers", "--inputs", toy / "f.duq", toy / "f.duq", "--out", toy / "fc.duq")[0] == 0
    single, fused = artifacts.load_prediction(toy / "f.duq"), artifacts.load_prediction(toy / "fc.duq")
    np.testing.assert_allclose(fused.logit_cov, single.logit_cov / 2, rtol=1e-10, atol=1e-14)
    assert run(capsys, "fuse", "--mode", "same-class", "--data", toy / "toy.npz", *common, "--rows", "0,1,2", "--out", toy / "fs.duq")[0] == 0
    fs = artifacts.load_prediction(toy / "fs.duq")
    assert len(fs) == 1 and fs.meta["provenance"] == ["row 0", "row 1", "row 2"]
    assert run(capsys, "risk", "--prediction", toy / "fs.duq", "--class", 1, "--threshold", 1)[1] == "0.000000\n"


def test_calibrate_and_report(toy, capsys):
    code, out, _ = run(capsys, "calibrate", "--data", toy / "toy.npz", "--model", toy / "m.duq", "--tune", "T")
    assert code == 0 and out.startswith("T ")
    code, out, _ = run(capsys, "calibrate", "--data", toy / "toy.npz", "--model", toy / "m.duq", "--posterior", toy / "p.duq",
                       "--tune", "tc", "--samples", 50, "--csv", toy / "r.csv", "--svg", toy / "r.svg")
    assert code == 0
    tc = float(out.splitlines()[0].split()[1])
    assert tc >= 1 and np.isclose(TC_GRID, tc, rtol=1e-5).any()
    assert (toy / "r.csv").read_text().startswith("bin_lower,bin_upper,count,accuracy,confidence")
    assert (toy / "r.svg").read_text().startswith("<svg")
    run(capsys, "predict", "--data", toy / "toy.npz", "--model", toy / "m.duq", "--posterior", toy / "p.duq",
        "--samples", 50, "--out", toy / "f.duq")
    code, out, _ = run(capsys, "report", "--prediction", toy / "f.duq")
    assert code == 0 and "ece_paper" in out
    code, out, _ = run(capsys, "report", "--data", toy / "toy.npz", "--model", toy / "m.duq", "--T", 2.0)
    assert code == 0 and "method temperature" in out


def test_config_file_and_flag_override(tmp_path, capsys):
    run(capsys, "synth", "--out", tmp_path / "toy.npz", "--n-samples", 100)
    (tmp_path / "cfg.json").write_text(json.dumps({"epochs": 2, "learning_rate": 0.01, "l2_weight": 0.5, "hidden": [4]}))
    code, _, _ = run(capsys, "train", "--data", tmp_path / "toy.npz", "--config", tmp_path / "cfg.json", "--l2", 0.25, "--out", tmp_path / "m.duq")
    assert code == 0
    _, _, meta = artifacts.load_artifact(tmp_path / "m.duq", "model")
    assert meta["train_config"]["l2_weight"] == 0.25 and meta["train_config"]["epochs"] == 2
    assert [l["output_dim"] for l in meta["layers"]] == [4, 3]
    (tmp_path / "bad.json").write_text(json.dumps({"epochs": 2, "momentum": 0.9}))
    code, _, err = run(capsys, "train", "--data", tmp_path / "toy.npz", "--config", tmp_path / "bad.json", "--out", tmp_path / "x")
    assert code == 2 and "momentum" in err


def test_usage_errors_exit_1(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--bogus")
    assert code == 1 and "usage" in err
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "risk", "--prediction", "x")[0] == 1
    assert run(capsys, "train", "--out", tmp_path / "m")[0] == 1  # no data source


def test_data_errors_exit_2(tmp_path, capsys):
    (tmp_path / "junk").write_bytes(b"not an artifact")
    code, _, err = run(capsys, "risk", "--prediction", tmp_path / "junk", "--class", 1, "--threshold", 0.5)
    assert code == 2 and "DUQ1" in err
    assert run(capsys, "risk", "--prediction", tmp_path / "missing", "--class", 1, "--threshold", 0.5)[0] == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "delta_uq.cli", "risk"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr


@pytest.mark.mnist
def test_calibrate_tc_on_mnist_validation(mnist_run, mnist_posterior, tmp_path, capsys):
    from conftest import mnist_dir

    artifacts.save_model(tmp_path / "m.duq", mnist_run["model"], {"train_config": {"l2_weight": 1e-4}})
    artifacts.save_posterior(tmp_path / "p.duq", mnist_posterior)
    code, out, err = run(capsys, "calibrate", "--mnist", mnist_dir(), "--split", "val", "--model", tmp_path / "m.duq",
                         "--posterior", tmp_path / "p.duq", "--tune", "tc")
    assert code == 0, err
    tc = float(out.splitlines()[0].split()[1])
    assert tc >= 1 and np.isclose(TC_GRID, tc, rtol=1e-5).any()
