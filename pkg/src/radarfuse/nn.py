"""Learnable-layer toolkit: linear layers, activations, losses, AdamW.

Reverse-mode gradients are explicit per-layer forward/backward pairs; the
model is a fixed DAG so no tape is needed. Layers accumulate gradients
in place (call zero_grad between steps).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class LinearLayer:
    """Fully connected layer computing y = x @ W.T + b."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        weights = np.asarray(weights)
        bias = np.asarray(bias)
        if weights.ndim != 2 or bias.ndim != 1:
            raise ValueError(f"bad layer shapes: W {weights.shape}, b {bias.shape}")
        if bias.shape[0] != weights.shape[0]:
            raise ValueError(
                f"bias length {bias.shape[0]} != output dim {weights.shape[0]}"
            )
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
            raise ValueError("layer parameters must be finite")
        self.weights = weights
        self.bias = bias
        self.grad_weights = np.zeros_like(weights)
        self.grad_bias = np.zeros_like(bias)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def zero_grad(self) -> None:
        self.grad_weights[...] = 0
        self.grad_bias[...] = 0


def init_linear(in_dim: int, out_dim: int, rng: np.random.Generator,
                dtype=np.float32) -> LinearLayer:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero bias."""
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    weights = rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype)
    return LinearLayer(weights, np.zeros(out_dim, dtype=dtype))


def linear_forward(layer: LinearLayer, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ValueError(
            f"linear input shape {x.shape} incompatible with in_dim {layer.in_dim}"
        )
    return x @ layer.weights.T + layer.bias


def linear_backward(layer: LinearLayer, x: np.ndarray,
                    upstream: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients; return the gradient w.r.t. x."""
    x = np.asarray(x)
    upstream = np.asarray(upstream)
    if upstream.shape != (x.shape[0], layer.out_dim):
        raise ValueError(
            f"upstream shape {upstream.shape} incompatible with "
            f"batch {x.shape[0]} x out_dim {layer.out_dim}"
        )
    layer.grad_weights += upstream.T @ x
    layer.grad_bias += upstream.sum(axis=0)
    return upstream @ layer.weights


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x), 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.asarray(upstream) * (x > 0)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction stabilization."""
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input must be finite")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(probs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given softmax output `probs`."""
    probs = np.asarray(probs)
    upstream = np.asarray(upstream)
    inner = (upstream * probs).sum(axis=-1, keepdims=True)
    return probs * (upstream - inner)


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray,
                       ignore_label: int | None = None):
    """Mean per-row cross entropy; returns (loss, gradient w.r.t. logits).

    Rows whose label equals ignore_label are skipped (zero gradient, not
    counted in the mean). Uses log-sum-exp stabilization.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"bad shapes: logits {logits.shape}, labels {labels.shape}")
    if not np.all(np.isfinite(logits)):
        raise ValueError("cross entropy input must be finite")
    counted = np.ones(len(labels), dtype=bool)
    if ignore_label is not None:
        counted = labels != ignore_label
    n = int(counted.sum())
    if n == 0:
        return 0.0, np.zeros_like(logits)
    if labels[counted].min() < 0 or labels[counted].max() >= logits.shape[1]:
        raise ValueError("label out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(len(labels))[counted]
    loss = float(-log_probs[rows, labels[counted]].sum() / n)
    grad = np.exp(log_probs)
    grad[rows, labels[counted]] -= 1.0
    grad[~counted] = 0.0
    grad /= n
    return loss, grad.astype(logits.dtype)


@dataclass
class AdamWState:
    """Per-parameter moment accumulators plus hyperparameters."""

    lr: float = 4e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_init(params: list[np.ndarray], lr: float = 4e-4,
               weight_decay: float = 1e-2) -> AdamWState:
    state = AdamWState(lr=lr, weight_decay=weight_decay)
    state.m = [np.zeros_like(p) for p in params]
    state.v = [np.zeros_like(p) for p in params]
    return state


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray],
               state: AdamWState):
    """One decoupled-weight-decay Adam update, in place on `params`."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= state.lr * (m_hat / (np.sqrt(v_hat) + state.eps)
                         + state.weight_decay * p)
    return params, state
