"""Laplace covariance of the trailing-layer parameters.

The log-likelihood Hessian is replaced by its Gauss-Newton/Fisher form

    I = sum_n sum_m eta_{m,n} J_{m,n} J_{m,n}^T,   eta = f (1 - f),

so that ``P = (I + prior_precision * 1)^{-1}``.  Because ``I`` is a sum of
rank-M terms ``U_n U_n^T`` with ``U_n = J_n diag(sqrt(eta_n))``, ``P`` can be
built by a sequence of rank-M downdates starting from the prior covariance
(:func:`recursive_covariance`), or assembled in information form and inverted
once (:func:`direct_covariance`).  The two agree to rounding error.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import blas, lapack, solve_triangular

from .errors import DomainError, NumericError, ShapeError
from .nn_core import ModelParams, _as_batch, forward, jacobian_factors, jacobian_g, softmax

log = logging.getLogger(__name__)

UPDATE_JITTER = 1e-12
DEFAULT_CHUNK = 256
KRON_CHUNK = 1024


@dataclass(frozen=True, eq=False)
class PosteriorCovariance:
    """Covariance over ``theta[:n_trailing(r)]``.

    ``P`` is stored unscaled; the covariance used downstream is ``tc * P``
    (see :attr:`scaled`).
    """

    P: np.ndarray
    r: int
    n_samples_processed: int = 0
    prior_precision: float = 1.0
    tc: float = 1.0

    @property
    def dim(self) -> int:
        return self.P.shape[0]

    @property
    def scaled(self) -> np.ndarray:
        return self.tc * self.P if self.tc != 1.0 else self.P


def prior_covariance(n_params: int, prior_precision: float, r: int) -> PosteriorCovariance:
    if not prior_precision > 0:
        raise DomainError("prior precision must be positive")
    return PosteriorCovariance(np.eye(n_params) / prior_precision, r, 0, float(prior_precision))


def eta(p) -> np.ndarray:
    """Per-class Fisher weights ``p_m (1 - p_m)``, each in [0, 1/4]."""
    p = np.asarray(p, dtype=np.float64)
    return p * (1.0 - p)


def sample_score(model: ModelParams, x, r: int | None = None) -> np.ndarray:
    """``U_n``: logit Jacobian with column ``m`` scaled by ``sqrt(eta_m)``.

    One input gives ``(n_trailing(r), M)``; a batch gives ``(N, n_trailing(r), M)``.
    """
    jac = jacobian_g(model, x, r)
    w = np.sqrt(eta(softmax(forward(model, x))))
    return jac * w[..., None, :]


def _downdate(P: np.ndarray, U: np.ndarray, index) -> None:
    """In place: ``P <- P - P U (I + U^T P U)^{-1} U^T P``."""
    PU = P @ U
    S = U.T @ PU
    S[np.diag_indices_from(S)] += 1.0 + UPDATE_JITTER
    c, info = lapack.dpotrf(S, lower=1)
    if info != 0 or not np.all(np.isfinite(PU)):
        raise NumericError(f"covariance update failed at sample {index}")
    X = solve_triangular(c, PU.T, lower=True, check_finite=False).T
    # X X^T = K U^T P with gain K = P U S^{-1}
    P -= X @ X.T
    P += P.T
    P *= 0.5


def recursive_update(post: PosteriorCovariance, score: np.ndarray, index=None) -> PosteriorCovariance:
    """One step ``K = P U (I + U^T P U)^{-1}``, ``P' = P - K U^T P``.

    ``score`` is a single ``U_n`` of shape ``(n, M)`` or several scores stacked
    column-wise; both count as one update of ``post``.
    """
    U = np.asarray(score, dtype=np.float64)
    if U.ndim != 2 or U.shape[0] != post.dim:
        raise ShapeError(f"score of shape {U.shape} for a {post.dim}-dim covariance")
    if not np.all(np.isfinite(U)):
        raise NumericError(f"non-finite score at sample {index if index is not None else post.n_samples_processed}")
    P = post.P.copy()
    _downdate(P, U, index if index is not None else post.n_samples_processed)
    return replace(post, P=P, n_samples_processed=post.n_samples_processed + 1)


def _stacked_scores(model, x, r):
    U = sample_score(model, x, r)  # (B, n, M)
    return U.transpose(1, 0, 2).reshape(U.shape[1], -1)


def recursive_covariance(
    model: ModelParams,
    x,
    r: int,
    prior_precision: float,
    block_size: int = 1,
    chunk: int = DEFAULT_CHUNK,
) -> PosteriorCovariance:
    """Run the recursion over ``x`` in order, starting from the prior.

    With ``block_size > 1`` the scores of that many consecutive samples are
    stacked into one update.  In exact arithmetic this is the same as
    ``block_size`` single-sample steps; it only trades the number of passes
    over ``P`` for a larger inner solve.
    """
    x, _ = _as_batch(model, x)
    if block_size < 1:
        raise DomainError("block_size must be at least 1")
    n_r = model.n_trailing(r)
    post = prior_covariance(n_r, prior_precision, r)
    P = post.P
    chunk = max(chunk, block_size) // block_size * block_size
    for start in range(0, x.shape[0], chunk):
        U = sample_score(model, x[start:start + chunk], r)
        if not np.all(np.isfinite(U)):
            bad = start + int(np.argmax(~np.isfinite(U).all(axis=(1, 2))))
            raise NumericError(f"non-finite score at sample {bad}")
        for b in range(0, U.shape[0], block_size):
            blk = U[b:b + block_size]
            _downdate(P, blk.transpose(1, 0, 2).reshape(n_r, -1), start + b)
        log.debug("processed %d samples", min(start + chunk, x.shape[0]))
    return replace(post, P=P, n_samples_processed=x.shape[0])


def fisher_information(model: ModelParams, x, r: int, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """``sum_n U_n U_n^T`` over ``x``, accumulated from the stacked scores."""
    x, _ = _as_batch(model, x)
    n_r = model.n_trailing(r)
    F = np.zeros((n_r, n_r), order="F")
    for start in range(0, x.shape[0], chunk):
        A = _stacked_scores(model, x[start:start + chunk], r)
        # lower triangle only; mirrored below
        F = blas.dsyrk(1.0, A, beta=1.0, c=F, lower=1, overwrite_c=1)
    return np.tril(F) + np.tril(F, -1).T


def fisher_information_kron(model: ModelParams, x, r: int, chunk: int = KRON_CHUNK) -> np.ndarray:
    """Same matrix as :func:`fisher_information`, using the per-layer Kronecker form.

    The block of layers ``a, b`` is ``sum_n G_n (x) H_n`` with
    ``G_n = sum_m eta_m delta_a[:, m] delta_b[:, m]^T`` and ``H_n = hb_a hb_b^T``,
    which costs about ``2 / M`` of the plain accumulation.
    """
    x, _ = _as_batch(model, x)
    sizes = [spec.n_params for spec in reversed(model.layers[len(model.layers) - model._check_r(r):])]
    edges = np.concatenate([[0], np.cumsum(sizes)])
    n_r = int(edges[-1])
    acc = {}
    for start in range(0, x.shape[0], chunk):
        xb = x[start:start + chunk]
        w = eta(softmax(forward(model, xb)))
        factors = jacobian_factors(model, xb, r)
        nb = xb.shape[0]
        for a, (da, ha) in enumerate(factors):
            dw = da * w[:, None, :]
            for b in range(a, len(factors)):
                db, hb = factors[b]
                G = np.matmul(dw, db.transpose(0, 2, 1)).reshape(nb, -1)
                H = (ha[:, :, None] * hb[:, None, :]).reshape(nb, -1)
                if (a, b) not in acc:
                    acc[a, b] = np.zeros((G.shape[1], H.shape[1]), order="F")
                acc[a, b] = blas.dgemm(1.0, G, H, trans_a=1, beta=1.0, c=acc[a, b], overwrite_c=1)
    F = np.empty((n_r, n_r))
    for (a, b), blk in acc.items():
        oa, ia = factors[a][0].shape[1], factors[a][1].shape[1]
        ob, ib = factors[b][0].shape[1], factors[b][1].shape[1]
        blk = blk.reshape(oa, ob, ia, ib).transpose(0, 2, 1, 3).reshape(oa * ia, ob * ib)
        if a == b:
            blk = 0.5 * (blk + blk.T)
        F[edges[a]:edges[a + 1], edges[b]:edges[b + 1]] = blk
        if a != b:
            F[edges[b]:edges[b + 1], edges[a]:edges[a + 1]] = blk.T
    return F


def _spd_inverse(A, what):
    c, info = lapack.dpotrf(A, lower=1)
    if info != 0:
        raise NumericError(f"{what} is not positive definite (dpotrf info {info})")
    inv, info = lapack.dpotri(c, lower=1)
    if info != 0:
        raise NumericError(f"{what} is singular (dpotri info {info})")
    return np.tril(inv) + np.tril(inv, -1).T


def direct_covariance(
    model: ModelParams, x, r: int, prior_precision: float, chunk: int | None = None, kron: bool = True
) -> PosteriorCovariance:
    """Assemble the information matrix and invert it once."""
    if not prior_precision > 0:
        raise DomainError("prior precision must be positive")
    x, _ = _as_batch(model, x)
    if x.shape[0] == 0:
        F = np.zeros((model.n_trailing(r),) * 2)
    elif kron:
        F = fisher_information_kron(model, x, r, chunk or KRON_CHUNK)
    else:
        F = fisher_information(model, x, r, chunk or DEFAULT_CHUNK)
    F[np.diag_indices_from(F)] += prior_precision
    return PosteriorCovariance(_spd_inverse(F, "information matrix"), r, x.shape[0], float(prior_precision))


METHODS = ("direct", "recursive")


def compute_covariance(
    model: ModelParams, x, r: int, prior_precision: float, method: str = "direct", block_size: int = 256
) -> PosteriorCovariance:
    """Dispatch to :func:`direct_covariance` or :func:`recursive_covariance`."""
    if method == "direct":
        return direct_covariance(model, x, r, prior_precision)
    if method == "recursive":
        return recursive_covariance(model, x, r, prior_precision, block_size=block_size)
    raise DomainError(f"unknown covariance method {method!r}; expected one of {METHODS}")


def scale_covariance(post: PosteriorCovariance, tc: float) -> PosteriorCovariance:
    """Multiply the effective covariance by ``tc``; factors compose multiplicatively."""
    if not tc > 0:
        raise DomainError(f"covariance scale must be positive, got {tc}")
    if tc < 1:
        warnings.warn("covariance scale below 1 shrinks the last-layer covariance", stacklevel=2)
    return replace(post, tc=post.tc * float(tc))
