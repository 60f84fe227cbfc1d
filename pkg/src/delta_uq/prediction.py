"""Point predictions, delta-method logit Gaussians and MC marginalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .nn_core import ModelParams, _as_batch, forward, forward_cache, jacobian_factors, jacobian_g, softmax
from .posterior import PosteriorCovariance

DEFAULT_SAMPLES = 1000


@dataclass(frozen=True, eq=False)
class LogitGaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ShapeError(f"mean {mean.shape} and covariance {cov.shape} do not match")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True, eq=False)
class PmfEstimate:
    """MC estimate of the marginal PMF and its covariance.

    ``samples`` holds the individual PMF draws when they were kept.
    """

    pmf: np.ndarray
    cov: np.ndarray
    K: int
    seed: int
    stream: int = 0
    samples: np.ndarray | None = None


def predict_point(model: ModelParams, x, T: float = 1.0) -> np.ndarray:
    """``softmax(g(x) / T)`` at the MAP parameters."""
    return softmax(forward(model, x), T)


def classify(p) -> np.ndarray | int:
    """Index of the most probable class; ties go to the lowest index."""
    out = np.argmax(np.asarray(p), axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def check_posterior(model: ModelParams, post: PosteriorCovariance) -> None:
    if post.dim != model.n_trailing(post.r):
        raise ConfigError(
            f"posterior covers {post.dim} parameters, the last {post.r} layers have {model.n_trailing(post.r)}"
        )


def project(jac_a: np.ndarray, post: PosteriorCovariance, jac_b: np.ndarray) -> np.ndarray:
    """``tc * J_a^T P J_b`` for single-input Jacobians."""
    return post.tc * (jac_a.T @ (post.P @ jac_b))


def _sym(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def delta_propagate(model: ModelParams, post: PosteriorCovariance, x) -> LogitGaussian:
    """Gaussian over the logits of one input, linearized at the MAP parameters."""
    check_posterior(model, post)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("delta_propagate takes one input; use delta_propagate_batch")
    jac = jacobian_g(model, x, post.r)
    return LogitGaussian(forward(model, x), _sym(project(jac, post, jac)))


def delta_propagate_batch(model: ModelParams, post: PosteriorCovariance, x, chunk: int = 64):
    """Logit means ``(N, M)`` and covariances ``(N, M, M)`` for a batch of inputs.

    Uses the per-layer structure ``J_m = kron(delta_m, hb)``: each block of
    ``P`` is contracted with the layer inputs first, which costs about
    ``n_r^2`` per input instead of ``M n_r^2``.
    """
    check_posterior(model, post)
    x, _ = _as_batch(model, x)
    n, m = x.shape[0], model.n_classes
    means = forward(model, x)
    covs = np.empty((n, m, m))
    if n == 0:
        return means, covs
    specs = list(reversed(model.layers[len(model.layers) - post.r:]))
    dims = [(s.output_dim, s.input_dim + 1) for s in specs]
    edges = np.concatenate([[0], np.cumsum([o * i for o, i in dims])])
    blocks = {}
    for a in range(len(dims)):
        for b in range(a, len(dims)):
            blk = post.P[edges[a]:edges[a + 1], edges[b]:edges[b + 1]]
            blocks[a, b] = np.ascontiguousarray(blk).reshape(-1, dims[b][1])
    for start in range(0, n, chunk):
        factors = jacobian_factors(model, x[start:start + chunk], post.r)
        nb = factors[0][0].shape[0]
        acc = np.zeros((nb, m, m))
        for (a, b), blk in blocks.items():
            (da, ha), (db, hb) = factors[a], factors[b]
            (oa, ia), (ob, _) = dims[a], dims[b]
            t = (blk @ hb.T).reshape(oa, ia, ob, nb)
            q = np.einsum("jkln,nk->njl", t, ha)  # h_a^T P_ab h_b per input
            term = np.matmul(da.transpose(0, 2, 1), np.matmul(q, db))
            acc += term if a == b else term + term.transpose(0, 2, 1)
        covs[start:start + nb] = post.tc * _sym(acc)
    return means, covs


def sqrt_factor(cov: np.ndarray) -> np.ndarray:
    """``L`` with ``L L^T = cov`` from an eigendecomposition, negative eigenvalues set to 0.

    Works on a single matrix or a stack.
    """
    w, v = np.linalg.eigh(cov)
    return v * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


def _stream_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(stream),))))


def _check_k(K):
    if K < 1:
        raise DomainError(f"sample count must be at least 1, got {K}")


def sample_pmfs(lg: LogitGaussian, K: int = DEFAULT_SAMPLES, seed: int = 0, stream: int = 0) -> np.ndarray:
    """``K`` draws ``softmax(g)``, ``g ~ N(mean, cov)``, as a ``(K, M)`` array."""
    _check_k(K)
    z = _stream_rng(seed, stream).standard_normal((K, lg.mean.size))
    return softmax(lg.mean + z @ sqrt_factor(lg.cov).T)


def _pmf_mean(f):
    # centre on the first draw so identical draws reproduce it exactly
    return f[..., 0, :] + (f - f[..., :1, :]).mean(axis=-2)


def pmf_moments(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and ``1/K``-normalized sample covariance of PMF draws."""
    mean = _pmf_mean(f)
    c = f - mean[..., None, :]
    return mean, np.swapaxes(c, -1, -2) @ c / f.shape[-2]


def mc_marginalize(
    lg: LogitGaussian, K: int = DEFAULT_SAMPLES, seed: int = 0, stream: int = 0, keep_samples: bool = False
) -> PmfEstimate:
    """Average the softmax over ``K`` draws from the logit Gaussian."""
    f = sample_pmfs(lg, K, seed, stream)
    pmf, cov = pmf_moments(f)
    return PmfEstimate(pmf, cov, K, seed, stream, f if keep_samples else None)


def _stream_normals(start, stop, K, m, seed):
    return np.stack([_stream_rng(seed, i).standard_normal((K, m)) for i in range(start, stop)])


def _batch_draws(means, covs, z):
    return softmax(means[:, None, :] + z @ np.swapaxes(sqrt_factor(covs), -1, -2))


def mc_marginalize_batch(means, covs, K: int = DEFAULT_SAMPLES, seed: int = 0, chunk: int = 64):
    """Row ``n`` uses random stream ``n``, so it matches ``mc_marginalize(..., stream=n)``."""
    _check_k(K)
    means = np.asarray(means, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    n, m = means.shape
    pmfs = np.empty((n, m))
    pcovs = np.empty((n, m, m))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        f = _batch_draws(means[start:stop], covs[start:stop], _stream_normals(start, stop, K, m, seed))
        pmfs[start:stop], pcovs[start:stop] = pmf_moments(f)
    return pmfs, pcovs


def mc_pmf_scaled(means, covs, scales, K: int = DEFAULT_SAMPLES, seed: int = 0, chunk: int = 64) -> np.ndarray:
    """MC PMFs for every covariance scale, ``(len(scales), N, M)``.

    Entry ``s`` equals ``mc_marginalize_batch(means, scales[s] * covs, K, seed)[0]``;
    the normal draws are generated once and shared by all scales.
    """
    _check_k(K)
    means = np.asarray(means, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    n, m = means.shape
    out = np.empty((len(scales), n, m))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        z = _stream_normals(start, stop, K, m, seed)
        for s, scale in enumerate(scales):
            out[s, start:stop] = _pmf_mean(_batch_draws(means[start:stop], scale * covs[start:stop], z))
    return out


def sample_logits_full_space(model: ModelParams, post: PosteriorCovariance, x, K: int, seed: int = 0, chunk: int = 4096):
    """Logits ``(K, N, M)`` with the trailing parameters drawn from ``N(theta_r, tc P)``.

    The layers in front of the trailing block are evaluated once and kept fixed.
    """
    check_posterior(model, post)
    _check_k(K)
    x, _ = _as_batch(model, x)
    L = len(model.layers)
    first = L - post.r
    hidden, _ = forward_cache(model, x)
    feats = hidden[first]
    n_r = post.dim
    factor = sqrt_factor(post.scaled)
    rng = np.random.default_rng(seed)
    offsets = model.offsets()
    out = np.empty((K, x.shape[0], model.n_classes))
    for start in range(0, K, chunk):
        k = min(chunk, K - start)
        thetas = model.theta[:n_r] + rng.standard_normal((k, n_r)) @ factor.T
        h = np.broadcast_to(feats, (k,) + feats.shape)
        for l in range(first, L):
            spec = model.layers[l]
            blk = thetas[:, offsets[l]:offsets[l] + spec.n_params]
            w = blk.reshape(k, spec.output_dim, spec.input_dim + 1).transpose(0, 2, 1)
            a = h @ w[:, :-1] + w[:, -1][:, None, :]
            h = np.maximum(a, 0.0) if spec.activation == "relu" else a
        out[start:start + k] = h
    return out


def mc_full_space(
    model: ModelParams, post: PosteriorCovariance, x, K: int = DEFAULT_SAMPLES, seed: int = 0
) -> PmfEstimate:
    """Reference MC estimate that samples the parameters instead of the logits."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("mc_full_space takes one input")
    f = softmax(sample_logits_full_space(model, post, x, K, seed)[:, 0, :])
    pmf, cov = pmf_moments(f)
    return PmfEstimate(pmf, cov, K, seed)
