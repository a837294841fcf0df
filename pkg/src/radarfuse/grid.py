"""BEV grid geometry, radar point containers, and pillarization.

Conventions: row indexes the y-axis, col indexes the x-axis; cells are
half-open boxes, so x = x_max or y = y_max falls out of bounds. Pillar
features live in 32-bit floats unless the encoder parameters are 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .nn import LinearLayer, init_linear

POINT_FIELDS = ("x", "y", "z", "rcs", "vx", "vy")


class RadarPoint(NamedTuple):
    """One radar return in the ego frame; rcs in dBsm, velocities in m/s."""

    x: float
    y: float
    z: float
    rcs: float
    vx: float
    vy: float


@dataclass(frozen=True)
class GridSpec:
    """Rectangular BEV lattice; extents must be integer multiples of cell_size."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    cell_size: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("grid extents must be positive")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        for lo, hi, axis in ((self.x_min, self.x_max, "x"), (self.y_min, self.y_max, "y")):
            n = round((hi - lo) / self.cell_size)
            if n < 1 or abs(n * self.cell_size - (hi - lo)) > 1e-9:
                raise ValueError(
                    f"{axis} extent {hi - lo} is not an integer multiple of "
                    f"cell_size {self.cell_size}"
                )

    @property
    def width(self) -> int:
        return round((self.x_max - self.x_min) / self.cell_size)

    @property
    def height(self) -> int:
        return round((self.y_max - self.y_min) / self.cell_size)

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        x = self.x_min + (col + 0.5) * self.cell_size
        y = self.y_min + (row + 0.5) * self.cell_size
        return x, y


def cell_index(spec: GridSpec, x: float, y: float):
    """Map an (x, y) position to its (row, col) cell, or None if out of bounds."""
    if not (spec.x_min <= x < spec.x_max and spec.y_min <= y < spec.y_max):
        return None
    row = int(np.floor((y - spec.y_min) / spec.cell_size))
    col = int(np.floor((x - spec.x_min) / spec.cell_size))
    # guard against float edge cases right at the upper boundary
    row = min(row, spec.height - 1)
    col = min(col, spec.width - 1)
    return row, col


class PillarGrid:
    """Sparse BEV grid: occupied (row, col) cells -> C-dim feature vectors.

    Cells absent from `cells` are empty pillars with implicit all-zero
    features. `pillar_rcs` maps a subset of occupied cells to their
    representative RCS. Treat instances as immutable after construction.
    """

    def __init__(self, spec: GridSpec, channels: int,
                 cells: dict[tuple[int, int], np.ndarray] | None = None,
                 pillar_rcs: dict[tuple[int, int], float] | None = None,
                 validate: bool = True):
        self.spec = spec
        self.channels = int(channels)
        self.cells = dict(cells) if cells else {}
        self.pillar_rcs = dict(pillar_rcs) if pillar_rcs else {}
        if not validate:
            return
        h, w = spec.height, spec.width
        for (row, col), feat in self.cells.items():
            if not (0 <= row < h and 0 <= col < w):
                raise ValueError(f"cell {(row, col)} outside {h}x{w} grid")
            feat = np.asarray(feat)
            if feat.shape != (self.channels,):
                raise ValueError(
                    f"cell {(row, col)} feature shape {feat.shape} != ({self.channels},)"
                )
            if not np.all(np.isfinite(feat)):
                raise ValueError(f"cell {(row, col)} has non-finite features")
        for key in self.pillar_rcs:
            if key not in self.cells:
                raise ValueError(f"pillar_rcs key {key} is not an occupied cell")

    def occupied(self) -> list[tuple[int, int]]:
        """Occupied cells in row-major order (deterministic iteration)."""
        return sorted(self.cells.keys())


@dataclass
class PointEncoder:
    """Shared per-point two-layer perceptron pooled per cell by elementwise max."""

    layer1: LinearLayer
    layer2: LinearLayer
    activation: str = "relu"  # "relu" | "linear"

    def __post_init__(self):
        if self.layer1.in_dim != len(POINT_FIELDS):
            raise ValueError(f"encoder input dim must be {len(POINT_FIELDS)}")
        if self.layer2.in_dim != self.layer1.out_dim:
            raise ValueError("encoder hidden dims inconsistent")
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation '{self.activation}'")

    @property
    def channels(self) -> int:
        return self.layer2.out_dim

    def zero_grad(self) -> None:
        self.layer1.zero_grad()
        self.layer2.zero_grad()


def init_point_encoder(hidden: int, channels: int, rng: np.random.Generator,
                       dtype=np.float32) -> PointEncoder:
    return PointEncoder(
        layer1=init_linear(len(POINT_FIELDS), hidden, rng, dtype),
        layer2=init_linear(hidden, channels, rng, dtype),
    )


def _as_point_array(points) -> np.ndarray:
    """Stack points into an (N, 6) float64 array, validating finiteness.

    Errors name the offending point index.
    """
    if isinstance(points, np.ndarray):
        arr = np.asarray(points, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != len(POINT_FIELDS):
            raise ValueError(f"point array must be (N, 6), got {arr.shape}")
    else:
        arr = np.array([tuple(p) for p in points], dtype=np.float64)
        if len(arr) == 0:
            arr = arr.reshape(0, len(POINT_FIELDS))
        if arr.ndim != 2 or arr.shape[1] != len(POINT_FIELDS):
            raise ValueError("points must each have 6 fields")
    bad = np.nonzero(~np.isfinite(arr).all(axis=1))[0]
    if len(bad):
        raise ValueError(f"point {int(bad[0])} has a non-finite field")
    return arr


def bucket_points(points, spec: GridSpec) -> dict[tuple[int, int], np.ndarray]:
    """Group points by cell; augmented rows are (x_rel, y_rel, z, rcs, vx, vy).

    x_rel/y_rel are metric offsets from the cell center. Out-of-bounds
    points are dropped. Returns float32 (n, 6) arrays per occupied cell.
    """
    arr = _as_point_array(points)
    raw: dict[tuple[int, int], list[np.ndarray]] = {}
    for row_vals in arr:
        key = cell_index(spec, row_vals[0], row_vals[1])
        if key is None:
            continue
        cx, cy = spec.cell_center(*key)
        aug = row_vals.copy()
        aug[0] -= cx
        aug[1] -= cy
        raw.setdefault(key, []).append(aug)
    return {
        key: np.stack(rows).astype(np.float32)
        for key, rows in sorted(raw.items())
    }


def bucket_rcs(points, spec: GridSpec) -> dict[tuple[int, int], float]:
    """Representative per-pillar RCS = max over the cell's points."""
    arr = _as_point_array(points)
    out: dict[tuple[int, int], float] = {}
    for row_vals in arr:
        key = cell_index(spec, row_vals[0], row_vals[1])
        if key is None:
            continue
        rcs = float(row_vals[3])
        if key not in out or rcs > out[key]:
            out[key] = rcs
    return out


def encode_pillar(encoder: PointEncoder, aug: np.ndarray):
    """Run the shared MLP over one cell's points and max-pool.

    Returns (feature, cache) where cache holds the intermediates needed by
    encode_pillar_backward.
    """
    x = aug.astype(encoder.layer1.weights.dtype, copy=False)
    h1 = x @ encoder.layer1.weights.T + encoder.layer1.bias
    a1 = np.maximum(h1, 0) if encoder.activation == "relu" else h1
    h2 = a1 @ encoder.layer2.weights.T + encoder.layer2.bias
    winners = np.argmax(h2, axis=0)  # first index wins ties
    feature = h2[winners, np.arange(h2.shape[1])]
    return feature, (x, h1, a1, winners)


def encode_pillar_backward(encoder: PointEncoder, cache, grad_feature: np.ndarray) -> None:
    """Accumulate encoder gradients for one cell given d(loss)/d(feature)."""
    x, h1, a1, winners = cache
    dh2 = np.zeros((x.shape[0], encoder.channels), dtype=grad_feature.dtype)
    dh2[winners, np.arange(encoder.channels)] = grad_feature
    encoder.layer2.grad_weights += dh2.T @ a1
    encoder.layer2.grad_bias += dh2.sum(axis=0)
    da1 = dh2 @ encoder.layer2.weights
    dh1 = da1 * (h1 > 0) if encoder.activation == "relu" else da1
    encoder.layer1.grad_weights += dh1.T @ x
    encoder.layer1.grad_bias += dh1.sum(axis=0)


def pillarize(points, spec: GridSpec, encoder: PointEncoder) -> PillarGrid:
    """Bucket points into pillars and encode each occupied cell.

    Each point's augmented vector passes through the shared two-layer
    perceptron; per-cell elementwise max-pooling yields the cell feature.
    An empty point list yields an empty (valid) grid.
    """
    buckets = bucket_points(points, spec)
    rcs = bucket_rcs(points, spec)
    cells = {}
    for key, aug in buckets.items():
        feature, _ = encode_pillar(encoder, aug)
        cells[key] = feature
    return PillarGrid(spec, encoder.channels, cells, rcs)


def to_dense(grid: PillarGrid) -> np.ndarray:
    """Densify the sparse map into a C x H x W float array (absent cells zero)."""
    dtype = np.float32
    for feat in grid.cells.values():
        dtype = np.asarray(feat).dtype
        break
    out = np.zeros((grid.channels, grid.spec.height, grid.spec.width), dtype=dtype)
    for (row, col), feat in grid.cells.items():
        out[:, row, col] = feat
    return out


def sparsify(dense: np.ndarray, spec: GridSpec,
             pillar_rcs: dict[tuple[int, int], float] | None = None) -> PillarGrid:
    """Inverse of to_dense: cells whose stored vector is all-zero are dropped."""
    dense = np.asarray(dense)
    if dense.ndim != 3 or dense.shape[1:] != (spec.height, spec.width):
        raise ValueError(
            f"dense shape {dense.shape} incompatible with grid "
            f"{spec.height}x{spec.width}"
        )
    cells = {}
    rows, cols = np.nonzero(np.any(dense != 0, axis=0))
    for row, col in zip(rows.tolist(), cols.tolist()):
        cells[(row, col)] = dense[:, row, col].copy()
    rcs = None
    if pillar_rcs is not None:
        rcs = {k: v for k, v in pillar_rcs.items() if k in cells}
    return PillarGrid(spec, dense.shape[0], cells, rcs)
