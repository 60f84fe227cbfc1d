"""Fusion of logit Gaussians and threshold-exceedance risk.

Fusion works on the logits; a PMF is formed afterwards with
:func:`delta_uq.prediction.mc_marginalize`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import DomainError, NumericError, ShapeError
from .nn_core import ModelParams, forward, jacobian_g
from .posterior import PosteriorCovariance
from .prediction import LogitGaussian, PmfEstimate, _sym, check_posterior, project, sample_pmfs

JITTER = 1e-10


@dataclass(frozen=True, eq=False)
class FusedLogit(LogitGaussian):
    provenance: tuple = field(default=())


def _cholesky(a: np.ndarray, what: str):
    """Cholesky factor of ``a``; on failure retry once with ``JITTER * trace/dim`` on the diagonal."""
    try:
        return cho_factor(a, lower=True)
    except LinAlgError:
        pass
    scale = np.trace(a) / a.shape[0]
    if not scale > 0:
        raise NumericError(f"{what} is singular (zero trace)")
    try:
        return cho_factor(a + JITTER * scale * np.eye(a.shape[0]), lower=True)
    except LinAlgError:
        raise NumericError(f"{what} is singular even after jitter") from None


def fuse_classifiers(inputs: Sequence[LogitGaussian], names: Sequence[str] | None = None) -> FusedLogit:
    """Precision-weighted combination of estimates from independent classifiers."""
    inputs = list(inputs)
    if not inputs:
        raise DomainError("nothing to fuse")
    names = tuple(names) if names is not None else tuple(f"classifier {c}" for c in range(len(inputs)))
    m = inputs[0].mean.size
    info = np.zeros((m, m))
    vec = np.zeros(m)
    for lg, name in zip(inputs, names):
        if lg.mean.size != m:
            raise ShapeError(f"{name} has {lg.mean.size} classes, expected {m}")
        fac = _cholesky(lg.cov, f"covariance of {name}")
        info += cho_solve(fac, np.eye(m))
        vec += cho_solve(fac, lg.mean)
    fac = _cholesky(_sym(info), "fused information")
    cov = _sym(cho_solve(fac, np.eye(m)))
    return FusedLogit(cov @ vec, cov, provenance=names)


@dataclass(frozen=True, eq=False)
class CrossCovariance:
    """Joint logit covariance of several inputs; block ``(i, j)`` is ``R[i*M:(i+1)*M, j*M:(j+1)*M]``."""

    R: np.ndarray
    n_classes: int

    def block(self, i: int, j: int) -> np.ndarray:
        m = self.n_classes
        return self.R[i * m:(i + 1) * m, j * m:(j + 1) * m]


def cross_covariance(model: ModelParams, post: PosteriorCovariance, inputs) -> CrossCovariance:
    """All blocks ``J_i^T (tc P) J_j`` for a shared model and posterior.

    Diagonal blocks go through the same arithmetic as
    :func:`delta_propagate`, so they equal its covariance exactly.
    """
    check_posterior(model, post)
    xs = [np.asarray(x, dtype=np.float64) for x in inputs]
    jacs = [jacobian_g(model, x, post.r) for x in xs]
    m = model.n_classes
    c = len(jacs)
    R = np.empty((c * m, c * m))
    for i in range(c):
        for j in range(i, c):
            blk = project(jacs[i], post, jacs[j])
            if i == j:
                blk = _sym(blk)
            R[i * m:(i + 1) * m, j * m:(j + 1) * m] = blk
            R[j * m:(j + 1) * m, i * m:(i + 1) * m] = blk.T
    return CrossCovariance(R, m)


def gls_fuse(means: np.ndarray, R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Generalized least squares estimate of one logit vector from ``C`` stacked observations.

    ``means`` is ``(C, M)``; ``R`` the ``(C*M, C*M)`` joint covariance.
    """
    means = np.asarray(means, dtype=np.float64)
    c, m = means.shape
    if R.shape != (c * m, c * m):
        raise ShapeError(f"joint covariance {R.shape} does not match {c} inputs of {m} classes")
    H = np.tile(np.eye(m), (c, 1))
    fac = _cholesky(_sym(R), "joint covariance R")
    RiH = cho_solve(fac, H)
    info = _sym(H.T @ RiH)
    cov = _sym(cho_solve(_cholesky(info, "fused information"), np.eye(m)))
    return cov @ (RiH.T @ means.reshape(-1)), cov


def fuse_same_class(model: ModelParams, post: PosteriorCovariance, inputs, names=None) -> FusedLogit:
    """Fuse predictions for several inputs known to share one class."""
    xs = [np.asarray(x, dtype=np.float64) for x in inputs]
    if not xs:
        raise DomainError("nothing to fuse")
    names = tuple(names) if names is not None else tuple(f"input {c}" for c in range(len(xs)))
    cross = cross_covariance(model, post, xs)
    means = np.stack([forward(model, x) for x in xs])
    if len(xs) == 1:
        return FusedLogit(means[0], cross.R, provenance=names)
    mean, cov = gls_fuse(means, cross.R)
    return FusedLogit(mean, cov, provenance=names)


def risk_assess(samples, m: int, gamma: float) -> float:
    """Fraction of PMF draws whose component ``m`` exceeds ``gamma``.

    ``samples`` is a ``(K, M)`` array of draws or a :class:`PmfEstimate`
    that kept its draws.
    """
    if not 0.0 <= gamma <= 1.0:
        raise DomainError(f"threshold must lie in [0, 1], got {gamma}")
    if isinstance(samples, PmfEstimate):
        if samples.samples is None:
            raise DomainError("estimate has no stored samples; use risk_from_gaussian")
        samples = samples.samples
    f = np.asarray(samples, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 1:
        raise ShapeError("need a (K, M) array of PMF samples with K >= 1")
    if not 0 <= m < f.shape[1]:
        raise DomainError(f"class index {m} outside 0..{f.shape[1] - 1}")
    return float(np.count_nonzero(f[:, m] > gamma)) / f.shape[0]


def risk_from_gaussian(lg: LogitGaussian, m: int, gamma: float, K: int, seed: int, stream: int = 0) -> float:
    """Risk from regenerated draws; same ``(K, seed, stream)`` as the PMF estimate gives the same draws."""
    return risk_assess(sample_pmfs(lg, K, seed, stream), m, gamma)
