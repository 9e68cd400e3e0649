"""Minimal dense network with exact analytic gradients.

A ReLU MLP with an identity output layer, double precision throughout.
Gradients are hand-derived backprop so they can be checked against central
finite differences to tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import RngStream


@dataclass
class ModelParams:
    """Per-layer weights/biases plus SGD momentum velocities.

    weights[k] has shape (out_k, in_k); layer shapes chain. Hidden layers are
    ReLU, the output layer is identity (logits).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    w_vel: list[np.ndarray]
    b_vel: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]


@dataclass
class ForwardCache:
    """Intermediate tensors of one forward pass, consumed by backward().

    activations[k] is the input to layer k (activations[0] is the batch);
    pre_acts[k] is layer k's affine output before the nonlinearity.
    """

    activations: list[np.ndarray]
    pre_acts: list[np.ndarray]


def init_params(layer_sizes: list[int], stream: RngStream) -> ModelParams:
    """He-initialized parameters: W ~ N(0, 2/in_dim), biases zero.

    Entries are drawn row-major from the stream, so identical (sizes, stream)
    yield identical parameters.
    """
    if len(layer_sizes) < 2:
        raise ValueError(f"need at least input and output sizes, got {layer_sizes}")
    if any(s <= 0 for s in layer_sizes):
        raise ValueError(f"layer sizes must be positive, got {layer_sizes}")

    weights, biases, w_vel, b_vel = [], [], [], []
    for in_dim, out_dim in zip(layer_sizes[:-1], layer_sizes[1:]):
        scale = np.sqrt(2.0 / in_dim)
        w = np.empty((out_dim, in_dim), dtype=np.float64)
        for i in range(out_dim):
            for j in range(in_dim):
                w[i, j] = stream.next_gaussian() * scale
        weights.append(w)
        biases.append(np.zeros(out_dim, dtype=np.float64))
        w_vel.append(np.zeros_like(w))
        b_vel.append(np.zeros(out_dim, dtype=np.float64))
    return ModelParams(weights, biases, w_vel, b_vel)


def forward(params: ModelParams, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Forward pass; returns (logits [B x C], cache for backward)."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.in_dim:
        raise ValueError(
            f"batch shape {batch.shape} incompatible with input dim {params.in_dim}"
        )
    activations = [batch]
    pre_acts = []
    a = batch
    last = params.n_layers - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        pre_acts.append(z)
        if k < last:
            a = np.maximum(z, 0.0)
            activations.append(a)
    return pre_acts[-1], ForwardCache(activations, pre_acts)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row softmax, stabilized by max subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its logit gradient (softmax - onehot)/B."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(b), labels]))

    dlogits = softmax(logits)
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    return loss, dlogits


def per_sample_ce(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row cross-entropy losses (no batch averaging)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    return log_z - shifted[np.arange(logits.shape[0]), labels]


def backward(
    params: ModelParams, cache: ForwardCache, dlogits: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Backprop dlogits to parameter gradients (dweights, dbiases)."""
    if dlogits.shape != cache.pre_acts[-1].shape:
        raise ValueError(
            f"dlogits shape {dlogits.shape} does not match logits "
            f"{cache.pre_acts[-1].shape}"
        )
    n = params.n_layers
    dweights = [np.empty(0)] * n
    dbiases = [np.empty(0)] * n
    delta = dlogits
    for k in range(n - 1, -1, -1):
        dweights[k] = delta.T @ cache.activations[k]
        dbiases[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ params.weights[k]) * (cache.pre_acts[k - 1] > 0.0)
    return dweights, dbiases


def sgd_step(
    params: ModelParams,
    dweights: list[np.ndarray],
    dbiases: list[np.ndarray],
    lr: float,
    momentum: float,
) -> None:
    """In-place momentum SGD: v <- momentum*v + g; theta <- theta - lr*v."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    for g in dweights:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite weight gradient")
    for g in dbiases:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite bias gradient")
    for k in range(params.n_layers):
        params.w_vel[k] = momentum * params.w_vel[k] + dweights[k]
        params.b_vel[k] = momentum * params.b_vel[k] + dbiases[k]
        params.weights[k] -= lr * params.w_vel[k]
        params.biases[k] -= lr * params.b_vel[k]


def per_sample_grad_norm(params: ModelParams, x: np.ndarray, y: int) -> float:
    """L2 norm over all parameter gradients of one sample's CE loss."""
    logits, cache = forward(params, np.asarray(x, dtype=np.float64)[None, :])
    _, dlogits = softmax_ce(logits, np.array([y]))
    dweights, dbiases = backward(params, cache, dlogits)
    total = 0.0
    for g in dweights:
        total += float(np.sum(g * g))
    for g in dbiases:
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def per_sample_grad_norms(
    params: ModelParams, batch: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Vector of per_sample_grad_norm over a batch, in one backward sweep.

    Rows never mix during backprop, so sample i's layer-k weight gradient is
    the outer product delta_k[i] x a_{k-1}[i], whose squared Frobenius norm
    factorizes as |delta|^2 * |a|^2 (plus |delta|^2 for the bias).
    """
    logits, cache = forward(params, batch)
    labels = np.asarray(labels, dtype=np.int64)
    b = logits.shape[0]
    delta = softmax(logits)
    delta[np.arange(b), labels] -= 1.0

    sq = np.zeros(b, dtype=np.float64)
    for k in range(params.n_layers - 1, -1, -1):
        a_sq = np.sum(cache.activations[k] ** 2, axis=1)
        d_sq = np.sum(delta**2, axis=1)
        sq += d_sq * (a_sq + 1.0)
        if k > 0:
            delta = (delta @ params.weights[k]) * (cache.pre_acts[k - 1] > 0.0)
    return np.sqrt(sq)
