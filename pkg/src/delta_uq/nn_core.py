"""Fully connected ReLU classifier: forward pass, softmax, log-likelihood and
the derivatives needed for training and for the delta method.

Layer ``l`` maps ``h`` to ``[h, 1] @ W_l`` where ``W_l`` has shape
``(input_dim + 1, output_dim)`` and its last row holds the bias.  The flat
parameter vector stacks the layers from the output layer backwards, each
matrix vectorized column-major::

    theta = [vec(W_{L-1}), vec(W_{L-2}), ..., vec(W_0)]

so the parameters of the last ``r`` layers are always the leading block
``theta[:n_trailing(r)]``.  This order is part of the artifact format.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, DomainError

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError(f"layer dims must be positive, got {self.input_dim}->{self.output_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        return (self.input_dim + 1) * self.output_dim


def mlp_layers(widths: Sequence[int]) -> list[LayerSpec]:
    """ReLU hidden layers and an identity output layer for ``widths = [n_x, ..., M]``."""
    if len(widths) < 2:
        raise ConfigError("need at least input and output width")
    n = len(widths) - 1
    return [
        LayerSpec(int(widths[i]), int(widths[i + 1]), "identity" if i == n - 1 else "relu")
        for i in range(n)
    ]


def check_layers(layers: Sequence[LayerSpec]) -> None:
    if not layers:
        raise ConfigError("empty layer list")
    for i, (a, b) in enumerate(zip(layers[:-1], layers[1:])):
        if a.output_dim != b.input_dim:
            raise ConfigError(f"layer {i} outputs {a.output_dim} but layer {i + 1} expects {b.input_dim}")
    if layers[-1].activation != "identity":
        raise ConfigError("final layer must be linear (identity activation)")


@dataclass(frozen=True, eq=False)
class ModelParams:
    layers: tuple[LayerSpec, ...]
    theta: np.ndarray

    def __post_init__(self):
        layers = tuple(self.layers)
        check_layers(layers)
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.ndim != 1 or theta.size != sum(l.n_params for l in layers):
            raise ShapeError(
                f"theta has {theta.size} entries, layers need {sum(l.n_params for l in layers)}"
            )
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def from_weights(cls, layers: Sequence[LayerSpec], weights: Sequence[np.ndarray]) -> "ModelParams":
        """Build from per-layer matrices given in forward order."""
        layers = tuple(layers)
        if len(weights) != len(layers):
            raise ShapeError("one weight matrix per layer required")
        parts = []
        for spec, w in zip(reversed(layers), reversed(list(weights))):
            w = np.asarray(w, dtype=np.float64)
            if w.shape != (spec.input_dim + 1, spec.output_dim):
                raise ShapeError(f"weight of shape {w.shape}, expected {(spec.input_dim + 1, spec.output_dim)}")
            parts.append(w.reshape(-1, order="F"))
        return cls(layers, np.concatenate(parts))

    @property
    def n_inputs(self) -> int:
        return self.layers[0].input_dim

    @property
    def n_classes(self) -> int:
        return self.layers[-1].output_dim

    @property
    def n_params(self) -> int:
        return self.theta.size

    def offsets(self) -> list[int]:
        """Start offset of each layer's block in ``theta`` (forward layer order)."""
        out = [0] * len(self.layers)
        pos = 0
        for l in range(len(self.layers) - 1, -1, -1):
            out[l] = pos
            pos += self.layers[l].n_params
        return out

    def weights(self) -> list[np.ndarray]:
        """Per-layer weight matrices (bias in the last row), forward order.

        The returned arrays are views into ``theta``.
        """
        ws = []
        for spec, off in zip(self.layers, self.offsets()):
            block = self.theta[off:off + spec.n_params]
            ws.append(block.reshape((spec.input_dim + 1, spec.output_dim), order="F"))
        return ws

    def n_trailing(self, r: int | None = None) -> int:
        """Number of parameters in the last ``r`` layers (all layers when ``None``)."""
        r = self._check_r(r)
        return sum(spec.n_params for spec in self.layers[len(self.layers) - r:])

    def _check_r(self, r):
        if r is None:
            return len(self.layers)
        if not isinstance(r, (int, np.integer)) or not 1 <= r <= len(self.layers):
            raise ConfigError(f"trailing block must cover 1..{len(self.layers)} layers, got {r!r}")
        return int(r)

    def with_theta(self, theta: np.ndarray) -> "ModelParams":
        return ModelParams(self.layers, theta)


def _as_batch(model: ModelParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.n_inputs:
        raise ShapeError(f"input of shape {np.shape(x)} does not match input_dim {model.n_inputs}")
    return x, single


def _relu(a):
    return np.maximum(a, 0.0)


def forward_cache(model: ModelParams, x) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Run the network on a batch, keeping intermediate values.

    Returns ``(hidden, pre)`` where ``hidden[l]`` is the input of layer ``l``
    (``hidden[0]`` is ``x``) and ``pre[l]`` the pre-activation it produces.
    ``pre[-1]`` are the logits.
    """
    h, _ = _as_batch(model, x)
    hidden, pre = [], []
    for spec, w in zip(model.layers, model.weights()):
        hidden.append(h)
        a = h @ w[:-1] + w[-1]
        pre.append(a)
        h = _relu(a) if spec.activation == "relu" else a
    return hidden, pre


def forward(model: ModelParams, x) -> np.ndarray:
    """Logits for one input (shape ``(M,)``) or a batch (shape ``(N, M)``)."""
    _, single = _as_batch(model, x)
    _, pre = forward_cache(model, x)
    return pre[-1][0] if single else pre[-1]


def _check_temperature(T):
    if not T > 0:
        raise DomainError(f"temperature must be positive, got {T}")


def softmax(z, T: float = 1.0) -> np.ndarray:
    """Softmax over the last axis of ``z / T``."""
    _check_temperature(T)
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits passed to softmax")
    s = z / T
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z, T: float = 1.0) -> np.ndarray:
    _check_temperature(T)
    s = np.asarray(z, dtype=np.float64) / T
    s = s - s.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _check_labels(y, n, n_classes):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ShapeError(f"{y.shape[0] if y.ndim else 1} labels for {n} inputs")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise DomainError("labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise DomainError(f"labels outside 0..{n_classes - 1}")
    return y


def log_likelihood(model: ModelParams, x, y) -> float:
    """Sum over samples of ``ln f_y(x)``; labels are 0-based class indices."""
    x, _ = _as_batch(model, x)
    if x.shape[0] == 0:
        raise DomainError("log-likelihood of an empty data set")
    y = _check_labels(y, x.shape[0], model.n_classes)
    logp = log_softmax(forward(model, x))
    return float(logp[np.arange(len(y)), y].sum())


def _backward(model, hidden, pre, delta, first_layer=0):
    """Accumulate ``sum_n delta_n^T dg/dtheta`` for layers ``first_layer..L-1``.

    ``delta`` has shape ``(N, M)``.  Returns the gradient in theta order.
    """
    ws = model.weights()
    grads = [None] * len(ws)
    for l in range(len(ws) - 1, first_layer - 1, -1):
        h = hidden[l]
        gw = np.empty_like(ws[l])
        gw[:-1] = h.T @ delta
        gw[-1] = delta.sum(axis=0)
        grads[l] = gw.reshape(-1, order="F")
        if l > first_layer:
            delta = (delta @ ws[l][:-1].T) * (pre[l - 1] > 0)
    return np.concatenate([grads[l] for l in range(len(ws) - 1, first_layer - 1, -1)])


def logit_residual(model: ModelParams, x, y) -> np.ndarray:
    """Derivative of ``ln f_y`` with respect to the logits, ``e_y - f``, per sample."""
    x, _ = _as_batch(model, x)
    y = _check_labels(y, x.shape[0], model.n_classes)
    r = -softmax(forward(model, x))
    r[np.arange(len(y)), y] += 1.0
    return r


def grad_loglik(model: ModelParams, x, y) -> np.ndarray:
    """Gradient of :func:`log_likelihood` with respect to ``theta``."""
    x, _ = _as_batch(model, x)
    if x.shape[0] == 0:
        raise DomainError("gradient of an empty data set")
    y = _check_labels(y, x.shape[0], model.n_classes)
    hidden, pre = forward_cache(model, x)
    resid = -softmax(pre[-1])
    resid[np.arange(len(y)), y] += 1.0
    return _backward(model, hidden, pre, resid)


def jacobian_factors(model: ModelParams, x, r: int | None = None):
    """Per trailing layer, last first: ``(delta, hb)`` with the layer's Jacobian
    block for logit ``m`` equal to ``kron(delta[..., m], hb)``.

    ``delta`` is ``(N, out, M)`` (d g / d layer output) and ``hb`` is the
    layer input with a trailing 1, ``(N, in + 1)``.
    """
    r = model._check_r(r)
    x, _ = _as_batch(model, x)
    hidden, pre = forward_cache(model, x)
    ws = model.weights()
    n, m_out = x.shape[0], model.n_classes
    first = len(ws) - r
    delta = np.broadcast_to(np.eye(m_out), (n, m_out, m_out)).copy()  # (N, unit, class)
    out = []
    for l in range(len(ws) - 1, first - 1, -1):
        out.append((delta, np.concatenate([hidden[l], np.ones((n, 1))], axis=1)))
        if l > first:
            delta = np.matmul(ws[l][:-1], delta) * (pre[l - 1] > 0)[:, :, None]
    return out


def jacobian_g(model: ModelParams, x, r: int | None = None) -> np.ndarray:
    """Jacobian of the logits with respect to the last ``r`` layers' parameters.

    For a single input the result has shape ``(n_trailing(r), M)`` and column
    ``m`` is ``d g_m / d theta_r``.  A batch of inputs gives ``(N, n_trailing(r), M)``.
    The layers in front of the trailing block only act as a fixed feature map.
    """
    _, single = _as_batch(model, x)
    blocks = []
    for delta, hb in jacobian_factors(model, x, r):
        n, _, m_out = delta.shape
        blk = delta[:, :, None, :] * hb[:, None, :, None]
        blocks.append(blk.reshape(n, -1, m_out))
    jac = np.concatenate(blocks, axis=1)
    return jac[0] if single else jac


def softmax_jacobian(p) -> np.ndarray:
    """``d softmax_j / d z_i = p_j (delta_ij - p_i)``, i.e. ``diag(p) - p p^T``."""
    p = np.asarray(p, dtype=np.float64)
    return np.diag(p) - np.outer(p, p)
