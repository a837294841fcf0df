"""Camera-radar BEV fusion: height collapse, deformable cross attention,
height re-projection, and volumetric concatenation.

The attention is single-head and deformable: each BEV location builds a
query from the concatenated camera and radar features, samples K points
per modality at learned continuous offsets (bilinear, zero padding), and
blends the per-point value projections with a joint softmax over all 2K
points. Offsets are in cell units, measured from the query location.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    LinearLayer,
    init_linear,
    linear_backward,
    linear_forward,
    softmax_rows,
    softmax_rows_backward,
)


@dataclass
class VolumeFeatures:
    """Dense C x Z x H x W feature volume."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ValueError(f"volume must be 4-d (C,Z,H,W), got {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError("volume dims must be >= 1")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume entries must be finite")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def depth(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]


def _vol_data(vol) -> np.ndarray:
    return vol.data if isinstance(vol, VolumeFeatures) else np.asarray(vol)


def collapse_height(vol) -> np.ndarray:
    """Reshape C x Z x H x W into (C*Z) x H x W; output channel c*Z + z maps
    to input (c, z). Pure index bookkeeping, no arithmetic."""
    data = _vol_data(vol)
    c, z, h, w = data.shape
    return np.ascontiguousarray(data).reshape(c * z, h, w)


def height_reproject(fused: np.ndarray, depth: int) -> np.ndarray:
    """Inverse of collapse_height: (C_fused) x H x W -> (C_fused/depth) x depth x H x W."""
    fused = np.asarray(fused)
    if fused.ndim != 3:
        raise ValueError(f"fused map must be 3-d, got {fused.shape}")
    c_fused, h, w = fused.shape
    if depth < 1 or c_fused % depth != 0:
        raise ValueError(f"channel count {c_fused} is not divisible by depth {depth}")
    return np.ascontiguousarray(fused).reshape(c_fused // depth, depth, h, w)


def concat_volume(reproj, img_vol) -> np.ndarray:
    """Channel concatenation with the re-projected channels first."""
    a = _vol_data(reproj)
    b = _vol_data(img_vol)
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"spatial dims differ: {a.shape[1:]} vs {b.shape[1:]}")
    return np.concatenate([a, b], axis=0)


# ---------------------------------------------------------------------------
# Bilinear sampling with zero padding
# ---------------------------------------------------------------------------

def _sample_many(fmap: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Bilinear-sample a C x H x W map at continuous (x=col, y=row) points.

    Cell centers sit at integer coordinates; neighbors outside the map
    contribute zeros. Returns ((P, C) samples, cache for backward).
    """
    c, h, w = fmap.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros((len(xs), c), dtype=fmap.dtype)
    corners = []
    for dy, dx, weight in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        yc = y0 + dy
        xc = x0 + dx
        valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
        vals = fmap[:, yc.clip(0, h - 1), xc.clip(0, w - 1)].T * valid[:, None]
        out += weight[:, None] * vals
        corners.append((yc, xc, valid, weight, vals))
    return out, (fmap.shape, fx, fy, corners)


def _sample_many_backward(cache, upstream: np.ndarray):
    """Gradients of _sample_many w.r.t. the map and the sample coordinates."""
    (c, h, w), fx, fy, corners = cache
    # scatter-add via per-corner bincount; much faster than np.add.at here
    acc = np.zeros(h * w * c)
    chan = np.arange(c)
    for yc, xc, valid, weight, _ in corners:
        contrib = (weight * valid)[:, None] * upstream
        pos = yc.clip(0, h - 1) * w + xc.clip(0, w - 1)
        acc += np.bincount((pos[:, None] * c + chan).ravel(),
                           weights=contrib.ravel(), minlength=h * w * c)
    grad_map = np.ascontiguousarray(
        acc.reshape(h * w, c).T.astype(upstream.dtype)).reshape(c, h, w)
    (_, _, _, _, v00), (_, _, _, _, v10), (_, _, _, _, v01), (_, _, _, _, v11) = corners
    dx_dir = (1 - fy)[:, None] * (v10 - v00) + fy[:, None] * (v11 - v01)
    dy_dir = (1 - fx)[:, None] * (v01 - v00) + fx[:, None] * (v11 - v10)
    grad_x = (upstream * dx_dir).sum(axis=1)
    grad_y = (upstream * dy_dir).sum(axis=1)
    return grad_map, grad_x, grad_y


def bilinear_sample(fmap: np.ndarray, x: float, y: float) -> np.ndarray:
    """Sample one point from a C x H x W map (zero padding outside)."""
    fmap = np.asarray(fmap)
    if fmap.ndim != 3:
        raise ValueError(f"map must be 3-d, got {fmap.shape}")
    if not (np.isfinite(x) and np.isfinite(y)):
        raise ValueError("sample coordinates must be finite")
    out, _ = _sample_many(fmap, np.asarray([float(x)]), np.asarray([float(y)]))
    return out[0]


# ---------------------------------------------------------------------------
# Multi-modal deformable cross attention
# ---------------------------------------------------------------------------

@dataclass
class FusionParams:
    """Single-head deformable attention over the two BEV modalities.

    Offset heads emit (dx, dy) pairs per sampled point; the weight head
    emits one logit per point, softmaxed jointly over the K camera points
    followed by the K radar points.
    """

    query_proj: LinearLayer
    offset_img: LinearLayer
    offset_rad: LinearLayer
    weight_head: LinearLayer
    value_img: LinearLayer
    value_rad: LinearLayer
    output_proj: LinearLayer
    k_points: int
    reproject_depth: int

    def __post_init__(self):
        d = self.query_proj.out_dim
        k2 = 2 * self.k_points
        if self.offset_img.out_dim != k2 or self.offset_rad.out_dim != k2:
            raise ValueError("offset heads must emit 2*k_points values")
        if self.weight_head.out_dim != k2:
            raise ValueError("weight head must emit one logit per sampled point")
        for head in (self.offset_img, self.offset_rad, self.weight_head):
            if head.in_dim != d:
                raise ValueError("attention heads must consume the query embedding")
        if self.value_img.out_dim != d or self.value_rad.out_dim != d:
            raise ValueError("value projections must emit the embedding width")
        if self.query_proj.in_dim != self.value_img.in_dim + self.value_rad.in_dim:
            raise ValueError("query must consume the concatenated modality channels")
        if self.output_proj.in_dim != d:
            raise ValueError("output projection must consume the embedding width")
        if self.reproject_depth < 1 or self.output_proj.out_dim % self.reproject_depth:
            raise ValueError(
                f"fused channels {self.output_proj.out_dim} must be divisible by "
                f"re-projection depth {self.reproject_depth}"
            )

    @property
    def fused_channels(self) -> int:
        return self.output_proj.out_dim

    def layers(self) -> dict[str, LinearLayer]:
        return {
            "query": self.query_proj,
            "off_img": self.offset_img,
            "off_rad": self.offset_rad,
            "attw": self.weight_head,
            "val_img": self.value_img,
            "val_rad": self.value_rad,
            "out": self.output_proj,
        }

    def zero_grad(self) -> None:
        for layer in self.layers().values():
            layer.zero_grad()


def init_fusion(c_img_bev: int, c_rad: int, d_model: int, k_points: int,
                c_fused: int, depth: int, rng: np.random.Generator,
                dtype=np.float32) -> FusionParams:
    """Offsets and attention logits start at zero: step-0 attention is a
    uniform blend of the 2K co-located samples. The output projection
    starts at zero (residual-style) so the fused stream contributes
    nothing until training pulls it in; its gradient is nonzero from the
    first step, so the stream still learns."""
    k2 = 2 * k_points
    zero_head = lambda: LinearLayer(
        np.zeros((k2, d_model), dtype=dtype), np.zeros(k2, dtype=dtype)
    )
    output_proj = LinearLayer(np.zeros((c_fused, d_model), dtype=dtype),
                              np.zeros(c_fused, dtype=dtype))
    return FusionParams(
        query_proj=init_linear(c_img_bev + c_rad, d_model, rng, dtype),
        offset_img=zero_head(),
        offset_rad=zero_head(),
        weight_head=zero_head(),
        value_img=init_linear(c_img_bev, d_model, rng, dtype),
        value_rad=init_linear(c_rad, d_model, rng, dtype),
        output_proj=output_proj,
        k_points=k_points,
        reproject_depth=depth,
    )


def _check_bev_inputs(img_bev: np.ndarray, rad_bev: np.ndarray,
                      params: FusionParams):
    if img_bev.ndim != 3 or rad_bev.ndim != 3:
        raise ValueError("BEV maps must be 3-d (C, H, W)")
    if img_bev.shape[1:] != rad_bev.shape[1:]:
        raise ValueError(
            f"spatial dims differ: {img_bev.shape[1:]} vs {rad_bev.shape[1:]}"
        )
    if img_bev.shape[0] != params.value_img.in_dim:
        raise ValueError(
            f"camera BEV has {img_bev.shape[0]} channels, params expect "
            f"{params.value_img.in_dim}"
        )
    if rad_bev.shape[0] != params.value_rad.in_dim:
        raise ValueError(
            f"radar BEV has {rad_bev.shape[0]} channels, params expect "
            f"{params.value_rad.in_dim}"
        )


def cross_modal_fuse(img_bev: np.ndarray, rad_bev: np.ndarray,
                     params: FusionParams) -> np.ndarray:
    """Fuse the two BEV maps into a C_fused x H x W map."""
    out, _ = cross_modal_fuse_cached(img_bev, rad_bev, params)
    return out


def cross_modal_fuse_cached(img_bev: np.ndarray, rad_bev: np.ndarray,
                            params: FusionParams):
    img_bev = np.asarray(img_bev)
    rad_bev = np.asarray(rad_bev)
    _check_bev_inputs(img_bev, rad_bev, params)
    ci = img_bev.shape[0]
    _, h, w = img_bev.shape
    m = h * w
    k = params.k_points
    d = params.query_proj.out_dim

    x_comb = np.concatenate(
        [img_bev.reshape(ci, m).T, rad_bev.reshape(rad_bev.shape[0], m).T], axis=1
    )
    queries = linear_forward(params.query_proj, x_comb)
    off_img = linear_forward(params.offset_img, queries)
    off_rad = linear_forward(params.offset_rad, queries)
    logits = linear_forward(params.weight_head, queries)
    att = softmax_rows(logits)

    rows, cols = np.divmod(np.arange(m), w)
    base_x = cols.astype(img_bev.dtype)
    base_y = rows.astype(img_bev.dtype)

    def sample_modality(fmap, offsets):
        xs = (base_x[:, None] + offsets[:, 0::2]).ravel()
        ys = (base_y[:, None] + offsets[:, 1::2]).ravel()
        return _sample_many(fmap, xs, ys)

    s_img, cache_img = sample_modality(img_bev, off_img)
    s_rad, cache_rad = sample_modality(rad_bev, off_rad)
    v_img = linear_forward(params.value_img, s_img).reshape(m, k, d)
    v_rad = linear_forward(params.value_rad, s_rad).reshape(m, k, d)

    agg = np.einsum("mk,mkd->md", att[:, :k], v_img)
    agg += np.einsum("mk,mkd->md", att[:, k:], v_rad)
    fused = linear_forward(params.output_proj, agg)
    out = fused.T.reshape(params.fused_channels, h, w)
    cache = (x_comb, queries, att, s_img, s_rad, v_img, v_rad, agg,
             cache_img, cache_rad)
    return out, cache


def cross_modal_fuse_backward(img_bev: np.ndarray, rad_bev: np.ndarray,
                              params: FusionParams, upstream: np.ndarray,
                              cache=None):
    """Accumulate parameter gradients; return (d_img_bev, d_rad_bev)."""
    img_bev = np.asarray(img_bev)
    rad_bev = np.asarray(rad_bev)
    if cache is None:
        _, cache = cross_modal_fuse_cached(img_bev, rad_bev, params)
    (x_comb, queries, att, s_img, s_rad, v_img, v_rad, agg,
     cache_img, cache_rad) = cache
    ci = img_bev.shape[0]
    _, h, w = img_bev.shape
    m = h * w
    k = params.k_points
    d = params.query_proj.out_dim
    if upstream.shape != (params.fused_channels, h, w):
        raise ValueError(
            f"upstream shape {upstream.shape} != {(params.fused_channels, h, w)}"
        )

    d_fused = upstream.reshape(params.fused_channels, m).T
    d_agg = linear_backward(params.output_proj, agg, d_fused)

    d_att = np.empty_like(att)
    d_att[:, :k] = np.einsum("md,mkd->mk", d_agg, v_img)
    d_att[:, k:] = np.einsum("md,mkd->mk", d_agg, v_rad)
    d_v_img = att[:, :k, None] * d_agg[:, None, :]
    d_v_rad = att[:, k:, None] * d_agg[:, None, :]

    d_s_img = linear_backward(params.value_img, s_img, d_v_img.reshape(m * k, d))
    d_s_rad = linear_backward(params.value_rad, s_rad, d_v_rad.reshape(m * k, d))
    d_map_img, d_xs_img, d_ys_img = _sample_many_backward(cache_img, d_s_img)
    d_map_rad, d_xs_rad, d_ys_rad = _sample_many_backward(cache_rad, d_s_rad)

    def offsets_grad(d_xs, d_ys):
        d_off = np.empty((m, 2 * k), dtype=d_xs.dtype)
        d_off[:, 0::2] = d_xs.reshape(m, k)
        d_off[:, 1::2] = d_ys.reshape(m, k)
        return d_off

    d_queries = linear_backward(params.offset_img, queries,
                                offsets_grad(d_xs_img, d_ys_img))
    d_queries += linear_backward(params.offset_rad, queries,
                                 offsets_grad(d_xs_rad, d_ys_rad))
    d_logits = softmax_rows_backward(att, d_att)
    d_queries += linear_backward(params.weight_head, queries, d_logits)
    d_x_comb = linear_backward(params.query_proj, x_comb, d_queries)

    d_img = d_x_comb[:, :ci].T.reshape(ci, h, w) + d_map_img
    d_rad = (d_x_comb[:, ci:].T.reshape(rad_bev.shape[0], h, w) + d_map_rad)
    return d_img, d_rad
