"""RCS-adaptive Gaussian feature densification on the sparse BEV grid.

Each occupied source pillar redistributes its feature vector to the cells
of a (2r+1)x(2r+1) Chebyshev window around it, weighted by a normalized
isotropic Gaussian whose width grows with the pillar's RCS. The densified
feature of a cell is its original feature plus the sum of all incoming
weighted source features.

Numeric contract: window weights are computed in float64 (scalar exp,
sequential row-major summation for the normalizer) and stored as float32;
scattering accumulates float32 `weight * feature` products in row-major
source order, one source at a time. This makes the deterministic scatter
bit-identical to a direct gather evaluated in the same per-cell order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import GridSpec, PillarGrid


@dataclass(frozen=True)
class DensifierConfig:
    """Width model sigma = clamp(sigma_base + rcs_gain*(rcs - rcs_ref)) and
    the Chebyshev window radius used for the scatter."""

    sigma_base: float
    rcs_ref: float
    rcs_gain: float
    sigma_min: float
    sigma_max: float
    window_radius: int

    def __post_init__(self):
        if not (0 < self.sigma_min <= self.sigma_base <= self.sigma_max):
            raise ValueError(
                f"need 0 < sigma_min <= sigma_base <= sigma_max, got "
                f"{self.sigma_min}, {self.sigma_base}, {self.sigma_max}"
            )
        if self.rcs_gain < 0:
            raise ValueError("rcs_gain must be nonnegative")
        if self.window_radius < 0:
            raise ValueError("window_radius must be nonnegative")


def default_config(cell_size: float) -> DensifierConfig:
    """Defaults scaled by the grid resolution; window covers +-3 sigma_base."""
    return DensifierConfig(
        sigma_base=1.0 * cell_size,
        rcs_ref=0.0,
        rcs_gain=0.1 * cell_size,
        sigma_min=0.25 * cell_size,
        sigma_max=3.0 * cell_size,
        window_radius=3,
    )


def sigma_from_rcs(rcs: float, config: DensifierConfig) -> float:
    """Clamped affine map from RCS (dBsm) to Gaussian width (meters)."""
    if not math.isfinite(rcs):
        raise ValueError("rcs must be finite")
    sigma = config.sigma_base + config.rcs_gain * (rcs - config.rcs_ref)
    return min(max(sigma, config.sigma_min), config.sigma_max)


@dataclass
class WeightWindow:
    """Normalized (2r+1)x(2r+1) scatter weights centered on a source cell."""

    source: tuple[int, int]
    radius: int
    weights: np.ndarray  # float32, sums to 1

    def __post_init__(self):
        size = 2 * self.radius + 1
        if self.weights.shape != (size, size):
            raise ValueError(
                f"weights shape {self.weights.shape} != ({size}, {size})"
            )


def gaussian_window(source: tuple[int, int], sigma: float, spec: GridSpec,
                    radius: int) -> WeightWindow:
    """Build the normalized Gaussian window for one source cell.

    Raw weight at offset (di, dj) is exp(-d^2 / (2 sigma^2)) with
    d = cell_size * sqrt(di^2 + dj^2) between cell centers; the window is
    divided by its own total, so offsets whose target falls outside the
    grid keep their share of the normalization (border mass is lost when
    scattering).
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    size = 2 * radius + 1
    raw = np.empty((size, size), dtype=np.float64)
    denom = 2.0 * sigma * sigma
    cs2 = spec.cell_size * spec.cell_size
    for i in range(size):
        di = i - radius
        for j in range(size):
            dj = j - radius
            raw[i, j] = math.exp(-(cs2 * (di * di + dj * dj)) / denom)
    total = 0.0
    for i in range(size):
        for j in range(size):
            total += raw[i, j]
    return WeightWindow(source, radius, (raw / total).astype(np.float32))


@dataclass
class _PlanSource:
    key: tuple[int, int]
    rcs: float
    rows: np.ndarray     # in-bounds target rows, window row-major order
    cols: np.ndarray
    weights: np.ndarray  # float32, matching rows/cols


@dataclass
class DensifyPlan:
    """Precomputed scatter structure; valid while occupancy and RCS are fixed."""

    spec: GridSpec
    channels: int
    sources: list[_PlanSource]          # row-major source order
    occupied_out: list[tuple[int, int]]  # output occupancy, row-major
    out_rcs: dict                        # output pillar_rcs assignment


def build_plan(grid: PillarGrid, config: DensifierConfig) -> DensifyPlan:
    """Window geometry, weights, and output RCS for every source."""
    h, w = grid.spec.height, grid.spec.width
    r = config.window_radius
    sources = []
    occupied = set(grid.cells)
    best: dict[tuple[int, int], tuple[float, float]] = {}
    for key in grid.occupied():
        if key not in grid.pillar_rcs:
            raise ValueError(f"occupied cell {key} is missing a pillar_rcs entry")
        rcs = grid.pillar_rcs[key]
        sigma = sigma_from_rcs(rcs, config)
        window = gaussian_window(key, sigma, grid.spec, r)
        rows, cols, weights = [], [], []
        for i in range(2 * r + 1):
            row = key[0] + i - r
            if not 0 <= row < h:
                continue
            for j in range(2 * r + 1):
                col = key[1] + j - r
                if not 0 <= col < w:
                    continue
                rows.append(row)
                cols.append(col)
                weight = window.weights[i, j]
                weights.append(weight)
                target = (row, col)
                occupied.add(target)
                if target not in grid.cells:
                    cand = (float(weight), rcs)
                    if target not in best or cand > best[target]:
                        best[target] = cand
        sources.append(_PlanSource(
            key, rcs,
            np.asarray(rows, dtype=np.int64),
            np.asarray(cols, dtype=np.int64),
            np.asarray(weights, dtype=np.float32),
        ))
    out_rcs = {key: rcs for key, (_, rcs) in best.items()}
    out_rcs.update(grid.pillar_rcs)
    return DensifyPlan(grid.spec, grid.channels, sources, sorted(occupied),
                       out_rcs)


def apply_plan(plan: DensifyPlan,
               features: dict[tuple[int, int], np.ndarray]) -> PillarGrid:
    """Scatter source features through the plan's windows.

    Output feature at p = input feature at p (zero if p was empty) plus the
    sum of weight * source feature over every source whose window covers p,
    accumulated in row-major source order.
    """
    dtype = np.float32
    for feat in features.values():
        dtype = np.asarray(feat).dtype
        break
    dense = np.zeros((plan.channels, plan.spec.height, plan.spec.width),
                     dtype=dtype)
    for (row, col), feat in features.items():
        dense[:, row, col] = feat
    # one fancy-indexed add per source: a window's targets are distinct
    # cells, so this equals per-target scalar accumulation
    for entry in plan.sources:
        feat = features[entry.key]
        dense[:, entry.rows, entry.cols] += entry.weights[None, :] * feat[:, None]
    cells = {key: dense[:, key[0], key[1]].copy() for key in plan.occupied_out}
    return PillarGrid(plan.spec, plan.channels, cells, dict(plan.out_rcs),
                      validate=False)


def densify(grid: PillarGrid, config: DensifierConfig) -> PillarGrid:
    """Redistribute every occupied pillar's feature over its Gaussian window."""
    return apply_plan(build_plan(grid, config), grid.cells)


def densify_backward(plan: DensifyPlan, upstream_dense: np.ndarray
                     ) -> dict[tuple[int, int], np.ndarray]:
    """Gradient w.r.t. the input features given a dense C x H x W gradient
    over the output grid.

    d(out[p])/d(in[q]) = [p == q] + weight(q -> p), so each input cell gets
    its direct upstream gradient plus the weighted sum over its window.
    """
    grads: dict[tuple[int, int], np.ndarray] = {}
    for entry in plan.sources:
        acc = upstream_dense[:, entry.key[0], entry.key[1]].copy()
        acc += upstream_dense[:, entry.rows, entry.cols] @ entry.weights
        grads[entry.key] = acc
    return grads
