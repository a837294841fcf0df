"""Probability-driven channel amplification of densified pillar features.

A small perceptron scores each feature channel per pillar with a softmax
probability; features scaled by their scores are concatenated with the
originals and projected back to C channels. With the projection set to
[I | 0] the whole module is the identity, which is also its initial state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import PillarGrid
from .nn import (
    LinearLayer,
    init_linear,
    linear_backward,
    linear_forward,
    relu_backward,
    relu_forward,
    softmax_rows,
    softmax_rows_backward,
)


@dataclass
class AmplifierParams:
    """Channel-score perceptron (C -> hidden -> C, softmax) plus the 2C -> C
    projection applied after concatenation."""

    phi1: LinearLayer
    phi2: LinearLayer
    proj: LinearLayer

    def __post_init__(self):
        c = self.phi1.in_dim
        if self.phi2.out_dim != c or self.phi2.in_dim != self.phi1.out_dim:
            raise ValueError("score perceptron dims must run C -> hidden -> C")
        if self.proj.in_dim != 2 * c or self.proj.out_dim != c:
            raise ValueError(
                f"projection must map 2C -> C, got {self.proj.in_dim} -> {self.proj.out_dim}"
            )

    @property
    def channels(self) -> int:
        return self.phi1.in_dim

    def zero_grad(self) -> None:
        self.phi1.zero_grad()
        self.phi2.zero_grad()
        self.proj.zero_grad()


def init_amplifier(channels: int, hidden: int, rng: np.random.Generator,
                   dtype=np.float32) -> AmplifierParams:
    """Random score perceptron; projection starts as [I | 0] (exact identity)."""
    proj_w = np.concatenate(
        [np.eye(channels, dtype=dtype), np.zeros((channels, channels), dtype=dtype)],
        axis=1,
    )
    return AmplifierParams(
        phi1=init_linear(channels, hidden, rng, dtype),
        phi2=init_linear(hidden, channels, rng, dtype),
        proj=LinearLayer(proj_w, np.zeros(channels, dtype=dtype)),
    )


def _score_forward(params: AmplifierParams, features: np.ndarray,
                   logit_shift: float):
    h1 = linear_forward(params.phi1, features)
    a1 = relu_forward(h1)
    logits = linear_forward(params.phi2, a1)
    if logit_shift:
        logits = logits + logit_shift
    probs = softmax_rows(logits)
    return probs, (h1, a1)


def channel_probabilities(params: AmplifierParams, features: np.ndarray,
                          logit_shift: float = 0.0) -> np.ndarray:
    """Per-pillar softmax channel scores; each row sums to 1.

    `logit_shift` adds a constant to the perceptron output before the
    softmax (test hook for shift invariance); the result is unchanged.
    """
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != params.channels:
        raise ValueError(
            f"features shape {features.shape} incompatible with C={params.channels}"
        )
    if features.shape[0] < 1:
        raise ValueError("need at least one pillar")
    probs, _ = _score_forward(params, features, logit_shift)
    return probs


def amplify(params: AmplifierParams, features: np.ndarray) -> np.ndarray:
    """Scale channels by their scores, concatenate with the originals, project."""
    out, _ = amplify_cached(params, features)
    return out


def amplify_cached(params: AmplifierParams, features: np.ndarray):
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != params.channels:
        raise ValueError(
            f"features shape {features.shape} incompatible with C={params.channels}"
        )
    probs, (h1, a1) = _score_forward(params, features, 0.0)
    gated = probs * features
    stacked = np.concatenate([features, gated], axis=1)
    out = linear_forward(params.proj, stacked)
    return out, (features, probs, h1, a1, stacked)


def amplify_backward(params: AmplifierParams, features: np.ndarray,
                     upstream: np.ndarray, cache=None) -> np.ndarray:
    """Chain rule through projection, concat, gating, and the score branch.

    Accumulates parameter gradients and returns d(loss)/d(features).
    """
    features = np.asarray(features)
    upstream = np.asarray(upstream)
    if cache is None:
        _, cache = amplify_cached(params, features)
    _, probs, h1, a1, stacked = cache
    if upstream.shape != (features.shape[0], params.channels):
        raise ValueError(
            f"upstream shape {upstream.shape} != {(features.shape[0], params.channels)}"
        )
    c = params.channels
    d_stacked = linear_backward(params.proj, stacked, upstream)
    d_direct = d_stacked[:, :c]
    d_gated = d_stacked[:, c:]
    d_probs = d_gated * features
    d_features = d_direct + d_gated * probs
    d_logits = softmax_rows_backward(probs, d_probs)
    d_a1 = linear_backward(params.phi2, a1, d_logits)
    d_h1 = relu_backward(h1, d_a1)
    d_features = d_features + linear_backward(params.phi1, features, d_h1)
    return d_features


def amplify_grid(params: AmplifierParams, grid: PillarGrid) -> PillarGrid:
    """Amplify every occupied pillar; occupancy and pillar RCS are unchanged."""
    keys = grid.occupied()
    if not keys:
        return PillarGrid(grid.spec, grid.channels, {}, {})
    features = np.stack([grid.cells[k] for k in keys])
    out = amplify(params, features)
    cells = {k: out[i] for i, k in enumerate(keys)}
    return PillarGrid(grid.spec, grid.channels, cells, grid.pillar_rcs)
