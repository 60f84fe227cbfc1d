import os
from pathlib import Path

import numpy as np
import pytest

from delta_uq.nn_core import ModelParams, mlp_layers

MNIST_CANDIDATES = [
    os.environ.get("DELTA_UQ_MNIST_DIR", ""),
    str(Path(__file__).resolve().parents[1] / "data" / "mnist"),
    "/root/data/mnist",
]


def mnist_dir():
    for cand in filter(None, MNIST_CANDIDATES):
        if any((Path(cand) / f"train-labels-idx1-ubyte{ext}").exists() for ext in ("", ".gz")):
            return Path(cand)
    return None


def random_model(widths, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    layers = mlp_layers(widths)
    n = sum(l.n_params for l in layers)
    return ModelParams(layers, scale * rng.standard_normal(n))


def central_diff(fun, theta, step=1e-6):
    """Central finite differences of a (possibly vector-valued) function of theta.

    Returns an array of shape ``(len(theta),) + out_shape``.
    """
    theta = np.asarray(theta, dtype=float)
    base = np.asarray(fun(theta))
    out = np.empty((theta.size,) + base.shape)
    for i in range(theta.size):
        h = step * max(1.0, abs(theta[i]))
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        out[i] = (np.asarray(fun(tp)) - np.asarray(fun(tm))) / (2 * h)
    return out


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance summary: one line per criterion, printed after the run
ACCEPTANCE_LINES = {}


def record_criterion(number, title, ok, detail=""):
    line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])


@pytest.fixture(scope="session")
def mnist_run():
    """Default-config MNIST model, trained once per session (seed 0)."""
    import time

    from delta_uq.data import load_mnist
    from delta_uq.nn_core import forward
    from delta_uq.training import TrainConfig, init_params, train_map
    from delta_uq.nn_core import mlp_layers

    d = mnist_dir()
    if d is None:
        pytest.skip("MNIST files not found; set DELTA_UQ_MNIST_DIR")
    start = time.perf_counter()
    train, val, test = (load_mnist(d, s) for s in ("train", "val", "test"))
    cfg = TrainConfig()
    model, report = train_map(init_params(mlp_layers([784, 300, 100, 40, 10]), cfg.seed), train.inputs, train.labels, cfg)
    test_acc = float(np.mean(np.argmax(forward(model, test.inputs), axis=1) == test.labels))
    seconds = time.perf_counter() - start
    return {"model": model, "report": report, "cfg": cfg, "train": train, "val": val, "test": test,
            "test_accuracy": test_acc, "seconds": seconds}


@pytest.fixture(scope="session")
def mnist_posterior(mnist_run):
    """Last-two-layer covariance of the session MNIST model, prior precision l2 * N."""
    from delta_uq.posterior import direct_covariance

    train = mnist_run["train"]
    return direct_covariance(mnist_run["model"], train.inputs, 2, mnist_run["cfg"].l2_weight * len(train))
