"""MAP training with Adam.

The minimized objective is::

    J(theta) = -(1/N) * sum_n ln f_{y_n}(x_n; theta) + (lam / 2) * ||theta||^2

which has the same minimizer as the log-posterior with a Gaussian prior of
precision ``lam * N``.  That precision is what the Laplace step must use.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, NumericError, TrainingError
from .nn_core import (
    LayerSpec,
    ModelParams,
    _backward,
    _check_labels,
    check_layers,
    forward,
    forward_cache,
    log_softmax,
    softmax,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    l2_weight: float = 1e-4
    epochs: int = 3
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be positive")
        if self.l2_weight < 0:
            raise DomainError("l2_weight must be non-negative")
        if self.epochs < 1:
            raise DomainError("epochs must be at least 1")
        if self.batch_size < 1:
            raise DomainError("batch_size must be at least 1")


@dataclass
class TrainReport:
    objective: float
    trace: list[float] = field(default_factory=list)
    train_accuracy: float = float("nan")


def init_params(layers: Sequence[LayerSpec], seed: int) -> ModelParams:
    """He-scaled uniform weights, ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``; zero biases."""
    layers = tuple(layers)
    check_layers(layers)
    rng = np.random.default_rng(seed)
    weights = []
    for spec in layers:
        bound = np.sqrt(6.0 / spec.input_dim)
        w = np.zeros((spec.input_dim + 1, spec.output_dim))
        w[:-1] = rng.uniform(-bound, bound, size=(spec.input_dim, spec.output_dim))
        weights.append(w)
    return ModelParams.from_weights(layers, weights)


def map_objective(model: ModelParams, x, y, l2_weight: float) -> float:
    """Mean cross-entropy plus ``(l2_weight / 2) * ||theta||^2``."""
    logp = log_softmax(forward(model, x))
    nll = -logp[np.arange(len(y)), y].mean()
    return float(nll + 0.5 * l2_weight * model.theta @ model.theta)


def _objective_grad(model, x, y, l2_weight):
    hidden, pre = forward_cache(model, x)
    resid = -softmax(pre[-1])
    resid[np.arange(len(y)), y] += 1.0
    g = _backward(model, hidden, pre, resid)
    return -g / len(y) + l2_weight * model.theta


def train_map(init: ModelParams, x, y, cfg: TrainConfig) -> tuple[ModelParams, TrainReport]:
    """Minimize the MAP objective with mini-batch Adam.

    Labels are 0-based.  Shuffling uses ``cfg.seed``; the last partial batch
    of an epoch is kept.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DomainError("training needs a non-empty (N, n_x) input matrix")
    y = _check_labels(y, x.shape[0], init.n_classes)
    n = x.shape[0]
    rng = np.random.default_rng(cfg.seed)
    theta = init.theta.copy()
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    step = 0
    trace = []
    model = init.with_theta(theta)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                grad = _objective_grad(model, x[idx], y[idx], cfg.l2_weight)
            except NumericError as exc:
                raise TrainingError(f"diverged: {exc}", epoch) from None
            step += 1
            m1 = cfg.beta1 * m1 + (1 - cfg.beta1) * grad
            m2 = cfg.beta2 * m2 + (1 - cfg.beta2) * grad * grad
            mhat = m1 / (1 - cfg.beta1 ** step)
            vhat = m2 / (1 - cfg.beta2 ** step)
            # in place: model.theta is this array
            theta -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)
        try:
            obj = map_objective(model, x, y, cfg.l2_weight)
        except NumericError:
            obj = float("nan")
        if not np.isfinite(obj):
            raise TrainingError("objective diverged", epoch)
        trace.append(obj)
        log.info("epoch %d: objective %.6f", epoch + 1, obj)
    acc = float(np.mean(np.argmax(forward(model, x), axis=1) == y))
    return model, TrainReport(objective=trace[-1], trace=trace, train_accuracy=acc)
