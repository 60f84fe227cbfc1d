"""Calibration metrics, reliability diagrams and tuning of T and tc.

Two ECE variants are computed.  ``paper`` sums ``|acc - conf| / |B_j|``
over non-empty bins; ``weighted`` is the usual ``sum_j |B_j|/N |acc - conf|``.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DomainError, ShapeError
from .nn_core import ModelParams, forward, softmax
from .posterior import PosteriorCovariance
from .prediction import DEFAULT_SAMPLES, classify, delta_propagate_batch, mc_marginalize_batch, mc_pmf_scaled

log = logging.getLogger(__name__)

DEFAULT_BINS = 10
T_GRID = np.logspace(-1, 1, 25)
TC_GRID = np.logspace(0, 2, 25)


def _check(preds, labels):
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.ndim != 2 or labels.shape != (preds.shape[0],):
        raise ShapeError(f"{labels.shape} labels for predictions of shape {preds.shape}")
    if preds.shape[0] == 0:
        raise DomainError("no predictions")
    return preds, labels


def brier(preds, labels) -> float:
    """Mean over samples of ``sum_m (1[y = m] - p_m)^2``."""
    preds, labels = _check(preds, labels)
    err = preds.copy()
    err[np.arange(len(labels)), labels] -= 1.0
    return float(np.mean(np.sum(err * err, axis=1)))


def accuracy(preds, labels) -> float:
    preds, labels = _check(preds, labels)
    return float(np.mean(classify(preds) == labels))


def log_score(preds, labels) -> float:
    """``sum_n ln p_n(y_n)``; zero probabilities are floored at the smallest normal double."""
    preds, labels = _check(preds, labels)
    p = preds[np.arange(len(labels)), labels]
    return float(np.sum(np.log(np.maximum(p, np.finfo(float).tiny))))


@dataclass
class BinStats:
    """Confidence histogram; bin ``j`` covers ``[j/J, (j+1)/J)``, the last one closed."""

    counts: np.ndarray
    acc: np.ndarray
    conf: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @property
    def n_bins(self) -> int:
        return self.counts.size

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def bin_predictions(preds, labels, n_bins: int = DEFAULT_BINS) -> BinStats:
    if n_bins < 1:
        raise DomainError("need at least one bin")
    preds, labels = _check(preds, labels)
    conf = preds.max(axis=1)
    correct = classify(preds) == labels
    idx = np.minimum(np.floor(conf * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    hits = np.bincount(idx, weights=correct, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    nz = np.maximum(counts, 1)
    edges = np.arange(n_bins + 1) / n_bins
    return BinStats(counts, hits / nz, conf_sum / nz, edges[:-1], edges[1:])


def ece(bins: BinStats, variant: str = "paper") -> float:
    used = bins.counts > 0
    if not used.any():
        raise DomainError("all bins are empty")
    gap = np.abs(bins.acc[used] - bins.conf[used])
    if variant == "paper":
        return float(np.sum(gap / bins.counts[used]))
    if variant == "weighted":
        return float(np.sum(gap * bins.counts[used]) / bins.total)
    raise DomainError(f"unknown ECE variant {variant!r}")


@dataclass
class CalibrationReport:
    method: str
    accuracy: float
    log_likelihood: float  # sum_n ln p(y_n | x_n), in units of 1e3
    brier: float
    ece_paper: float
    ece_weighted: float
    n_bins: int
    bins: BinStats = field(repr=False)
    T: float = 1.0
    tc: float = 1.0
    seconds: float = 0.0

    def summary(self) -> dict:
        return {
            "method": self.method,
            "accuracy": self.accuracy,
            "log_likelihood_1e3": self.log_likelihood,
            "brier": self.brier,
            "ece_paper": self.ece_paper,
            "ece_weighted": self.ece_weighted,
            "bins": self.n_bins,
            "T": self.T,
            "tc": self.tc,
        }


def evaluate(preds, labels, n_bins: int = DEFAULT_BINS, method: str = "", T: float = 1.0, tc: float = 1.0) -> CalibrationReport:
    bins = bin_predictions(preds, labels, n_bins)
    return CalibrationReport(
        method=method,
        accuracy=accuracy(preds, labels),
        log_likelihood=log_score(preds, labels) / 1e3,
        brier=brier(preds, labels),
        ece_paper=ece(bins, "paper"),
        ece_weighted=ece(bins, "weighted"),
        n_bins=n_bins,
        bins=bins,
        T=T,
        tc=tc,
    )


def _grid_argmin(grid, scores):
    best = None
    for g, s in sorted(zip(grid, scores), key=lambda t: t[0]):
        if best is None or s < best[1]:
            best = (g, s)
    return float(best[0])


def _check_grid(grid, default):
    grid = np.asarray(default if grid is None else grid, dtype=np.float64).ravel()
    if grid.size == 0:
        raise DomainError("empty grid")
    return grid


def tune_temperature(model: ModelParams, x, y, grid=None, n_bins: int = DEFAULT_BINS) -> float:
    """Grid value of ``T`` with the smallest paper-variant ECE; ties go to the smaller ``T``."""
    grid = _check_grid(grid, T_GRID)
    logits = forward(model, x)
    scores = [ece(bin_predictions(softmax(logits, T), y, n_bins)) for T in grid]
    return _grid_argmin(grid, scores)


def proposed_predictions(model, post, x, K=DEFAULT_SAMPLES, seed=0):
    means, covs = delta_propagate_batch(model, post, x)
    return mc_marginalize_batch(means, covs, K, seed)[0]


def tune_tc(
    model: ModelParams,
    post: PosteriorCovariance,
    x,
    y,
    grid=None,
    K: int = DEFAULT_SAMPLES,
    seed: int = 0,
    n_bins: int = DEFAULT_BINS,
    return_scores: bool = False,
):
    """Covariance scale from the grid minimizing the paper-variant ECE of the
    MC-marginalized PMF.  Every grid point reuses the same random streams.

    Grid values are absolute scales and replace ``post.tc``.
    """
    grid = _check_grid(grid, TC_GRID)
    means, base = delta_propagate_batch(model, replace(post, tc=1.0), x)
    scores = []
    for tc, pmfs in zip(grid, mc_pmf_scaled(means, base, grid, K, seed)):
        scores.append(ece(bin_predictions(pmfs, y, n_bins)))
        log.info("tc=%.4g ece=%.6g", tc, scores[-1])
    best = _grid_argmin(grid, scores)
    return (best, dict(zip(grid.tolist(), scores))) if return_scores else best


def report(
    model: ModelParams,
    x,
    y,
    posterior: PosteriorCovariance | None = None,
    T: float = 1.0,
    K: int = DEFAULT_SAMPLES,
    seed: int = 0,
    n_bins: int = DEFAULT_BINS,
) -> CalibrationReport:
    """Metrics for point predictions (no posterior) or the MC-marginalized PMF."""
    start = time.perf_counter()
    if posterior is None:
        preds = softmax(forward(model, x), T)
        method = "standard" if T == 1.0 else "temperature"
        tc = 1.0
    else:
        preds = proposed_predictions(model, posterior, x, K, seed)
        method = "proposed" if posterior.tc == 1.0 else "proposed_tc"
        tc = posterior.tc
    rep = evaluate(preds, y, n_bins, method, T, tc)
    rep.seconds = time.perf_counter() - start
    log.info("%s report in %.1f s", method, rep.seconds)
    return rep


CSV_COLUMNS = ("bin_lower", "bin_upper", "count", "accuracy", "confidence")


def reliability_rows(bins: BinStats) -> list[tuple]:
    return [
        (float(lo), float(hi), int(c), float(a), float(cf))
        for lo, hi, c, a, cf in zip(bins.lower, bins.upper, bins.counts, bins.acc, bins.conf)
    ]


def write_reliability_csv(path, bins: BinStats) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in reliability_rows(bins):
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def reliability_svg(bins: BinStats, title: str = "", size: int = 240) -> str:
    """Bar chart of per-bin accuracy with the diagonal as reference."""
    pad = 30
    inner = size - 2 * pad
    width = inner / bins.n_bins
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="{pad}" y="{pad}" width="{inner}" height="{inner}" fill="none" stroke="black"/>',
    ]
    for j, (c, a) in enumerate(zip(bins.counts, bins.acc)):
        if c == 0:
            continue
        h = a * inner
        parts.append(
            f'<rect x="{pad + j * width:.2f}" y="{pad + inner - h:.2f}" width="{width:.2f}" '
            f'height="{h:.2f}" fill="steelblue" stroke="white"/>'
        )
    parts.append(f'<line x1="{pad}" y1="{pad + inner}" x2="{pad + inner}" y2="{pad}" stroke="black" stroke-dasharray="4"/>')
    if title:
        parts.append(f'<text x="{size / 2}" y="{pad - 10}" text-anchor="middle" font-size="12">{title}</text>')
    parts.append(f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="10">confidence</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def write_reliability_svg(path, bins: BinStats, title: str = "") -> None:
    Path(path).write_text(reliability_svg(bins, title), encoding="utf-8")
