"""Local refinement stage: geometric feature aggregation around the coarse result.

Two branches model local structure on the coarsely moved cloud: a static edge
convolution over a kNN graph built once from the coarse coordinates, and a
far-region branch that weights edge features by squared direction cosines and
by how far each far point sits from the query. A GRU fuses the aggregated
local features with the first stage's global moving features, and a
zero-initialized head emits the fine per-point offsets.

All geometric quantities (covariances, far-region weights, direction
coefficients) are differentiable functions of the coarse coordinates; only
the index selections themselves are held fixed, so end-to-end gradients match
finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnauto
from .cloud import PointCloud, _pairwise_sq
from .errors import GraphMismatch, KTooLarge, ShapeMismatch, ZeroVector
from .nnauto import (MLP, GRUCell, Linear, ParamSet, Value, concat, constant,
                     gru_cell, matmul, norm_rows, powi, reshape, slice_axis,
                     take_rows, transpose, vmax, vmean, vsum)


@dataclass(frozen=True)
class LiaConfig:
    """Width and neighbourhood settings of the refinement stage."""

    channels: int = 32
    k_neighbors: int = 8      # covariance neighbourhood and edge-conv graph
    k_far: int = 8
    theta_r: float = 1.1
    noise_channels: int = 16
    linear_mlps: bool = False


@dataclass(frozen=True)
class FarRegion:
    """The k_far points of greatest distance from a center, with their weights.

    far_indices are ordered by descending distance (ties to the lower index);
    weights follow (r - |pq|)^2 normalized over the region and sum to one.
    """

    center_index: int
    far_indices: np.ndarray
    r: float
    weights: np.ndarray


@dataclass(frozen=True)
class DirectionCoefficients:
    """Squared direction cosines of one edge vector against the x/y/z axes."""

    c_x: float
    c_y: float
    c_z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.c_x, self.c_y, self.c_z])


def farthest_region(cloud: PointCloud, center: int, k_far: int,
                    theta_r: float = 1.1) -> FarRegion:
    """Select the k_far maximal-distance points and their relative-length weights."""
    n = len(cloud)
    if k_far >= n:
        raise KTooLarge(f"k_far={k_far} needs more than k_far points, n={n}")
    d = np.sqrt(((cloud.points - cloud.points[center]) ** 2).sum(axis=1))
    d[center] = -np.inf
    order = np.lexsort((np.arange(n), -d))[:k_far]
    dist = d[order]
    r = theta_r * float(dist.max())
    w = (r - dist) ** 2
    return FarRegion(center, order, r, w / w.sum())


def direction_coefficients(p: np.ndarray, q: np.ndarray) -> DirectionCoefficients:
    """Squared direction cosines of the edge p->q; they always sum to one."""
    pq = np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64)
    norm2 = float((pq * pq).sum())
    if norm2 == 0.0:
        raise ZeroVector("direction undefined for coincident points")
    c = pq * pq / norm2
    return DirectionCoefficients(float(c[0]), float(c[1]), float(c[2]))


class EdgeConvParams:
    """MLPs of the two stacked static edge-convolution layers."""

    def __init__(self, ps: ParamSet, name: str, channels: int, linear_mlps: bool = False):
        widths = [channels] if linear_mlps else [channels, channels]
        self.layer1 = MLP(ps, f"{name}.l1", channels, widths)
        self.layer2 = MLP(ps, f"{name}.l2", channels, widths)


def _edge_layer(features: Value, omega: np.ndarray, layer: MLP) -> Value:
    edges = nnauto.gather_sub(features, omega)            # (n, k, c)
    return vmax(layer(edges), axis=1)


def static_edge_conv(features: Value, omega: np.ndarray, params: EdgeConvParams) -> Value:
    """Two stacked max-pooled edge convolutions over one fixed kNN graph."""
    omega = np.asarray(omega, dtype=np.int64)
    if omega.ndim != 2 or omega.shape[0] != features.data.shape[0]:
        raise GraphMismatch(f"graph {omega.shape} does not match features "
                            f"{features.data.shape}")
    f1 = _edge_layer(features, omega, params.layer1)
    return _edge_layer(f1, omega, params.layer2)


class RelBlockParams:
    """Per-axis edge weight matrices and the residual MLP pair of one block."""

    def __init__(self, ps: ParamSet, name: str, channels: int, linear_mlps: bool = False):
        self.w_axis = [ps.add(f"{name}.w{ax}", (channels, channels)) for ax in "xyz"]
        widths = [channels] if linear_mlps else [channels, channels]
        self.mlp_edge = MLP(ps, f"{name}.edge", channels, widths)
        self.mlp_skip = MLP(ps, f"{name}.skip", channels, widths)


def far_region_weights(coords: Value, far_idx: np.ndarray, theta_r: float
                       ) -> tuple[Value, list[Value]]:
    """Differentiable relative-length weights and direction coefficients.

    Returns (weights (n, k, 1), [c_x, c_y, c_z] each (n, k, 1)) for the fixed
    far-point index selection.
    """
    n = coords.data.shape[0]
    q = take_rows(coords, far_idx)                        # (n, k, 3)
    p = reshape(coords, (n, 1, 3))
    pq = p - q
    d = norm_rows(pq)                                     # (n, k)
    r = reshape(vmax(d, axis=1), (n, 1))
    w = powi(nnauto.scale(r, theta_r) - d, 2)
    w_d = w / vsum(w, axis=1, keepdims=True)
    k = far_idx.shape[1]
    d3 = reshape(d, (n, k, 1))
    coeffs = [powi(slice_axis(pq, 2, a, a + 1) / d3, 2) for a in range(3)]
    return reshape(w_d, (n, k, 1)), coeffs


def relative_position_block(features: Value, far_idx: np.ndarray, w_d: Value,
                            coeffs: list[Value], params: RelBlockParams) -> Value:
    """Direction-weighted far-edge aggregation with a residual MLP pair.

    sum_axis (edges @ W_axis) * c_axis is evaluated as one stacked matmul:
    the per-axis coefficients scale whole edge rows, so they commute with the
    projections and the three products collapse into [c_x*E, c_y*E, c_z*E]
    against the vertically stacked weights.
    """
    edges = nnauto.gather_sub(features, far_idx)          # (n, k, c)
    weighted = concat([edges * (c_axis * w_d) for c_axis in coeffs], axis=-1)
    w_cat = concat(params.w_axis, axis=0)                 # (3c, c)
    pooled = vsum(matmul(weighted, w_cat), axis=1)        # (n, c)
    return params.mlp_edge(pooled) + params.mlp_skip(features)


class FineStage:
    """Edge-conv and far-region branches fused by a GRU into fine offsets."""

    def __init__(self, ps: ParamSet, name: str, cfg: LiaConfig, c_global: int):
        self.cfg = cfg
        c = cfg.channels
        self.embed = Linear(ps, f"{name}.embed", 3 + 9 + cfg.noise_channels, c)
        self.edge = EdgeConvParams(ps, f"{name}.edge", c, cfg.linear_mlps)
        self.rel1 = RelBlockParams(ps, f"{name}.rel1", c, cfg.linear_mlps)
        self.rel2 = RelBlockParams(ps, f"{name}.rel2", c, cfg.linear_mlps)
        agg_widths = [c] if cfg.linear_mlps else [c, c]
        self.agg = MLP(ps, f"{name}.agg", 3 * c, agg_widths)
        self.gproj = Linear(ps, f"{name}.gproj", c_global, c)
        self.gru = GRUCell(ps, f"{name}.gru", c)
        head_widths = [3] if cfg.linear_mlps else [c, 3]
        self.head = MLP(ps, f"{name}.head", c + cfg.noise_channels, head_widths,
                        zero_last=True)

    def forward(self, coarse: Value, f_global: Value, rng: np.random.Generator) -> Value:
        """Fine per-point offsets for the coarsely moved cloud."""
        cfg = self.cfg
        coords_np = coarse.data
        n = len(coords_np)
        if cfg.k_neighbors >= n or cfg.k_far >= n:
            raise KTooLarge(f"neighbourhoods need more than k points, n={n}")
        omega, far_idx = _local_structure(coords_np, cfg.k_neighbors, cfg.k_far)

        cov = _covariance_features(coarse, omega)
        x = concat([coarse, _zscore(cov)], axis=-1)
        x = nnauto.append_noise(x, cfg.noise_channels, rng)
        f = self.embed(x)

        f_edge = static_edge_conv(f, omega, self.edge)
        w_d, coeffs = far_region_weights(coarse, far_idx, cfg.theta_r)
        f_rel = relative_position_block(f, far_idx, w_d, coeffs, self.rel1)
        f_rel2 = relative_position_block(f_rel, far_idx, w_d, coeffs, self.rel2)
        return aggregate_and_fuse(f_edge, f_rel, f_rel2, f_global, self, rng)


def aggregate_and_fuse(f_edge: Value, f_rel: Value, f_rel2: Value, f_global: Value,
                       stage: FineStage, rng: np.random.Generator) -> Value:
    """Concatenate branch features, fuse with global features, emit offsets."""
    f_local = stage.agg(concat([f_edge, f_rel, f_rel2], axis=-1))
    hidden = stage.gproj(f_global)
    if hidden.data.shape != f_local.data.shape:
        raise ShapeMismatch(f"gru shapes {f_local.data.shape} vs {hidden.data.shape}")
    fused = gru_cell(f_local, hidden, stage.gru)
    head_in = nnauto.append_noise(fused, stage.cfg.noise_channels, rng)
    return stage.head(head_in)


def _local_structure(coords: np.ndarray, k: int, k_far: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed kNN graph and descending-distance far sets from one matrix.

    Selection runs in float32 (indices only); every distance that reaches the
    loss is recomputed in float64 from the chosen indices.
    """
    c32 = coords.astype(np.float32)
    d2 = _pairwise_sq(c32, c32)
    np.fill_diagonal(d2, np.inf)
    cand = np.argpartition(d2, k, axis=1)[:, : k + 1]
    cd = np.take_along_axis(d2, cand, axis=1)
    order = np.lexsort((cand, cd), axis=1)
    omega = np.take_along_axis(cand, order, axis=1)[:, :k]

    np.fill_diagonal(d2, -np.inf)
    fcand = np.argpartition(-d2, k_far - 1, axis=1)[:, :k_far]
    fd = np.take_along_axis(d2, fcand, axis=1)
    forder = np.lexsort((fcand, -fd), axis=1)
    far_idx = np.take_along_axis(fcand, forder, axis=1)
    return omega, far_idx


def _covariance_features(coords: Value, omega: np.ndarray) -> Value:
    """Differentiable (n, 9) neighbourhood covariance, self included, biased."""
    n = coords.data.shape[0]
    idx = np.concatenate([np.arange(n, dtype=np.int64)[:, None], omega], axis=1)
    nb = take_rows(coords, idx)                           # (n, k+1, 3)
    centered = nb - vmean(nb, axis=1, keepdims=True)
    cov = matmul(transpose(centered, (0, 2, 1)), centered)
    return reshape(nnauto.scale(cov, 1.0 / idx.shape[1]), (n, 9))


def _zscore(x: Value) -> Value:
    """Per-channel standardization over the cloud; variance floored at 1e-12."""
    mu = vmean(x, axis=0, keepdims=True)
    centered = x - mu
    var = vmean(powi(centered, 2), axis=0, keepdims=True)
    return centered / nnauto.sqrt(var + constant(1e-12))


def fine_forward(coarse_cloud: PointCloud, f_global: np.ndarray, cfg: LiaConfig,
                 stage: FineStage, seed: int) -> tuple[np.ndarray, PointCloud]:
    """Standalone refinement pass: offsets and the refined cloud."""
    rng = np.random.default_rng(seed)
    phi = stage.forward(constant(coarse_cloud.points), constant(np.asarray(f_global)), rng)
    refined = PointCloud(coarse_cloud.points + phi.data, id=coarse_cloud.id + ":fine")
    return phi.data, refined
