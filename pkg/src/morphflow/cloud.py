"""Point cloud container and geometric preprocessing.

Normalization, exact k-nearest-neighbour search (brute force with a grid-hash
accelerator for large clouds), farthest point sampling, per-point covariance
features, statistical outlier removal, DBSCAN cluster filtering and ROI box
extraction. All functions are pure: inputs are never mutated and ties are
broken by lowest point index so results are independent of evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCloud, EmptyCloud, KTooLarge, MTooLarge

GRID_ACCEL_THRESHOLD = 4096
_BLOCK_ROWS = 1024


@dataclass(frozen=True)
class PointCloud:
    """Ordered set of 3D points with optional per-point attribute rows."""

    points: np.ndarray
    attrs: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or (pts.size and pts.shape[1] != 3):
            raise EmptyCloud(f"points must be (n, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise DegenerateCloud("non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.attrs is not None:
            attrs = np.asarray(self.attrs, dtype=np.float64)
            if attrs.shape[0] != pts.shape[0]:
                raise DegenerateCloud(
                    f"attrs rows ({attrs.shape[0]}) must match points ({pts.shape[0]})")
            object.__setattr__(self, "attrs", attrs)

    def __len__(self) -> int:
        return self.points.shape[0]

    def select(self, indices: np.ndarray, id_suffix: str = "") -> "PointCloud":
        indices = np.asarray(indices, dtype=np.int64)
        attrs = self.attrs[indices] if self.attrs is not None else None
        return PointCloud(self.points[indices], attrs, self.id + id_suffix)


@dataclass(frozen=True)
class DisplacementField:
    """Per-point 3-vector offsets moving a source cloud toward a target shape."""

    offsets: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.offsets, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise DegenerateCloud(f"offsets must be (n, 3), got {arr.shape}")
        object.__setattr__(self, "offsets", arr)

    def compose(self, other: "DisplacementField") -> "DisplacementField":
        return DisplacementField(self.offsets + other.offsets)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) + self.offsets


@dataclass(frozen=True)
class NeighborSet:
    """k nearest neighbours of one query, distances ascending."""

    center_index: int
    neighbor_indices: np.ndarray
    distances: np.ndarray


@dataclass(frozen=True)
class RoiLabel:
    """Axis-aligned labelled box on one side of a pair (face or bone)."""

    name: str
    box_min: np.ndarray
    box_max: np.ndarray
    cloud_side: str

    def __post_init__(self):
        lo = np.asarray(self.box_min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.box_max, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise DegenerateCloud(f"roi {self.name}: box_min exceeds box_max")
        if self.cloud_side not in ("face", "bone"):
            raise DegenerateCloud(f"roi {self.name}: cloud_side must be face|bone")
        object.__setattr__(self, "box_min", lo)
        object.__setattr__(self, "box_max", hi)


def normalize(cloud: PointCloud) -> tuple[PointCloud, np.ndarray, float]:
    """Center at the origin and scale so the farthest point has unit norm.

    Returns (normalized cloud, center, scale); x_original = x * scale + center.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot normalize an empty cloud")
    center = cloud.points.mean(axis=0)
    shifted = cloud.points - center
    scale = float(np.sqrt((shifted * shifted).sum(axis=1).max()))
    if scale == 0.0:
        raise DegenerateCloud("all points identical, scale would be zero")
    return PointCloud(shifted / scale, cloud.attrs, cloud.id), center, scale


def denormalize(points: np.ndarray, center: np.ndarray, scale: float) -> np.ndarray:
    return np.asarray(points) * scale + np.asarray(center)


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, clipped at zero against rounding."""
    d2 = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


class GridIndex:
    """Uniform hash grid over a cloud for exact accelerated kNN queries.

    A query expands Chebyshev rings of cells; points in any unscanned ring sit
    at least ring*cell away, so the scan stops only once every point that could
    tie the current k-th distance has been enumerated. Results therefore match
    brute force exactly, including the lowest-index tie rule.
    """

    def __init__(self, points: np.ndarray):
        self.points = points
        n = len(points)
        lo = points.min(axis=0)
        extent = np.maximum(points.max(axis=0) - lo, 1e-12)
        self.cell = max(float((extent.prod() / max(n, 1)) ** (1.0 / 3.0)) * 1.3, 1e-12)
        self.origin = lo
        self.max_ring = int(np.ceil(extent.max() / self.cell)) + 2
        cells = np.floor((points - lo) / self.cell).astype(np.int64)
        order = np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0]))
        sorted_cells = cells[order]
        boundaries = np.nonzero(np.any(np.diff(sorted_cells, axis=0) != 0, axis=1))[0] + 1
        self.buckets: dict[tuple[int, int, int], np.ndarray] = {}
        for chunk in np.split(order, boundaries) if n else []:
            self.buckets[tuple(cells[chunk[0]])] = np.sort(chunk)

    def _ring_buckets(self, base: np.ndarray, ring: int) -> list[np.ndarray]:
        found = []
        for dx in range(-ring, ring + 1):
            for dy in range(-ring, ring + 1):
                if max(abs(dx), abs(dy)) < ring:
                    dz_range = (-ring, ring)
                else:
                    dz_range = range(-ring, ring + 1)
                for dz in dz_range:
                    b = self.buckets.get((base[0] + dx, base[1] + dy, base[2] + dz))
                    if b is not None:
                        found.append(b)
        return found

    def query(self, q: np.ndarray, k: int, exclude: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        base = np.floor((q - self.origin) / self.cell).astype(np.int64)
        chunks: list[np.ndarray] = []
        count = 0
        kth = np.inf
        ring = 0
        while True:
            hit = self._ring_buckets(base, ring)
            if hit:
                chunk = np.concatenate(hit)
                if exclude is not None:
                    chunk = chunk[~np.isin(chunk, exclude)]
                if chunk.size:
                    chunks.append(chunk)
                    count += chunk.size
                    if count >= k:
                        d_all = np.sqrt(((self.points[np.concatenate(chunks)] - q) ** 2).sum(axis=1))
                        kth = np.partition(d_all, k - 1)[k - 1]
            if (count >= k and ring * self.cell > kth) or ring > self.max_ring:
                break
            ring += 1
        idx = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
        d = np.sqrt(((self.points[idx] - q) ** 2).sum(axis=1))
        order = np.lexsort((idx, d))[:k]
        return idx[order], d[order]


def knn(cloud: PointCloud, query, k: int, exclude_self: bool = False) -> NeighborSet:
    """The k nearest points to a query position or point index.

    query may be a 3-vector or an integer index into the cloud. With
    exclude_self, the query's own point (the index, or any point at distance
    exactly zero for positional queries) is not eligible. Distance ties pick
    the lower index. Clouds above GRID_ACCEL_THRESHOLD points use the hash
    grid; both paths agree exactly.
    """
    pts = cloud.points
    n = len(cloud)
    if isinstance(query, (int, np.integer)):
        center = int(query)
        q = pts[center]
        exclude = np.array([center], dtype=np.int64) if exclude_self else None
    else:
        center = -1
        q = np.asarray(query, dtype=np.float64).reshape(3)
        exclude = None
        if exclude_self:
            zero_idx = np.nonzero(np.all(pts == q, axis=1))[0]
            exclude = zero_idx if zero_idx.size else None
    usable = n - (0 if exclude is None else exclude.size)
    if k > usable:
        raise KTooLarge(f"k={k} exceeds usable point count {usable}")

    if n > GRID_ACCEL_THRESHOLD:
        idx, dist = GridIndex(pts).query(q, k, exclude)
        return NeighborSet(center, idx, dist)

    d = np.sqrt(((pts - q) ** 2).sum(axis=1))
    mask = np.ones(n, dtype=bool)
    if exclude is not None:
        mask[exclude] = False
    valid = np.nonzero(mask)[0]
    order = np.lexsort((valid, d[valid]))[:k]
    sel = valid[order]
    return NeighborSet(center, sel, d[sel])


def knn_graph(points: np.ndarray, k: int, include_self: bool = False) -> np.ndarray:
    """(n, k) neighbour indices for every point at once, distances ascending.

    Blocked brute force; memory stays bounded for dense preprocessing-scale
    clouds. Ties resolve by (distance, index) within the candidate set.
    """
    n = len(points)
    limit = k if include_self else k + 1
    if limit > n:
        raise KTooLarge(f"k={k} too large for n={n}")
    out = np.empty((n, k), dtype=np.int64)
    for lo in range(0, n, _BLOCK_ROWS):
        hi = min(lo + _BLOCK_ROWS, n)
        d2 = _pairwise_sq(points[lo:hi], points)
        if not include_self:
            d2[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        if k < n - 1:
            cand = np.argpartition(d2, k, axis=1)[:, : k + 1]
            cd = np.take_along_axis(d2, cand, axis=1)
            order = np.lexsort((cand, cd), axis=1)
            out[lo:hi] = np.take_along_axis(cand, order, axis=1)[:, :k]
        else:
            out[lo:hi] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def cross_knn(queries: np.ndarray, points: np.ndarray, k: int) -> np.ndarray:
    """(m, k) indices of the k nearest points to each query row."""
    m, n = len(queries), len(points)
    if k > n:
        raise KTooLarge(f"k={k} too large for n={n}")
    out = np.empty((m, k), dtype=np.int64)
    for lo in range(0, m, _BLOCK_ROWS):
        hi = min(lo + _BLOCK_ROWS, m)
        d2 = _pairwise_sq(queries[lo:hi], points)
        if k < n:
            cand = np.argpartition(d2, k - 1, axis=1)[:, :k]
            cd = np.take_along_axis(d2, cand, axis=1)
            order = np.lexsort((cand, cd), axis=1)
            out[lo:hi] = np.take_along_axis(cand, order, axis=1)
        else:
            out[lo:hi] = np.argsort(d2, axis=1, kind="stable")
    return out


def farthest_point_sample(cloud: PointCloud, m: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subset of m indices, deterministic given the start index."""
    n = len(cloud)
    if not 1 <= m <= n:
        raise MTooLarge(f"m={m} out of range for n={n}")
    pts = cloud.points
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    best = np.sqrt(((pts - pts[start]) ** 2).sum(axis=1))
    for i in range(1, m):
        nxt = int(np.argmax(best))
        chosen[i] = nxt
        d = np.sqrt(((pts - pts[nxt]) ** 2).sum(axis=1))
        np.minimum(best, d, out=best)
    return chosen


def local_covariance(cloud: PointCloud, k: int = 8) -> np.ndarray:
    """Per-point 3x3 covariance of the point plus its k nearest neighbours.

    Returns an (n, 9) row-major flattening using the biased 1/(k+1) normalizer.
    """
    n = len(cloud)
    if k >= n:
        raise KTooLarge(f"k={k} needs more than k points, n={n}")
    idx = knn_graph(cloud.points, k)
    idx = np.concatenate([np.arange(n, dtype=np.int64)[:, None], idx], axis=1)
    nb = cloud.points[idx]                       # (n, k+1, 3)
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    return cov.reshape(n, 9)


def remove_statistical_outliers(cloud: PointCloud, k: int = 16, std_ratio: float = 2.0) -> PointCloud:
    """Drop points whose mean k-neighbour distance is an outlier.

    Threshold is global mean + std_ratio * global std of the per-point mean
    neighbour distances. Surviving points keep their original order.
    """
    n = len(cloud)
    if k >= n:
        raise KTooLarge(f"k={k} needs more than k points, n={n}")
    idx = knn_graph(cloud.points, k)
    d = np.sqrt(((cloud.points[:, None, :] - cloud.points[idx]) ** 2).sum(axis=2))
    mean_d = d.mean(axis=1)
    threshold = mean_d.mean() + std_ratio * mean_d.std()
    keep = np.nonzero(mean_d <= threshold)[0]
    return cloud.select(keep)


def _radius_neighbors(points: np.ndarray, eps: float) -> list[np.ndarray]:
    """Per-point indices within eps (self included), computed in row blocks."""
    n = len(points)
    eps2 = eps * eps
    out: list[np.ndarray] = []
    for lo in range(0, n, _BLOCK_ROWS):
        hi = min(lo + _BLOCK_ROWS, n)
        d2 = _pairwise_sq(points[lo:hi], points)
        for row in d2:
            out.append(np.nonzero(row <= eps2)[0])
    return out


def dbscan_labels(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Standard DBSCAN labels; -1 marks noise, clusters are numbered from 0.

    Core points have at least min_pts neighbours within eps (self included).
    Expansion starts from the lowest unvisited index, so labels and cluster
    numbering are deterministic.
    """
    n = len(points)
    neighbors = _radius_neighbors(points, eps)
    core = np.array([len(nb) >= min_pts for nb in neighbors])
    labels = np.full(n, -2, dtype=np.int64)     # -2 = unvisited
    cluster = 0
    for i in range(n):
        if labels[i] != -2:
            continue
        if not core[i]:
            labels[i] = -1
            continue
        labels[i] = cluster
        frontier = list(neighbors[i])
        while frontier:
            j = frontier.pop()
            if labels[j] == -1:
                labels[j] = cluster           # border point adopted by cluster
            if labels[j] != -2:
                continue
            labels[j] = cluster
            if core[j]:
                frontier.extend(neighbors[j])
        cluster += 1
    return labels


def dbscan_filter(cloud: PointCloud, eps: float, min_pts: int) -> PointCloud:
    """Keep only the largest DBSCAN cluster; order of survivors is preserved."""
    if eps <= 0 or min_pts < 1:
        raise DegenerateCloud("dbscan needs eps > 0 and min_pts >= 1")
    if len(cloud) == 0:
        return cloud
    labels = dbscan_labels(cloud.points, eps, min_pts)
    valid = labels >= 0
    if not valid.any():
        return cloud.select(np.empty(0, dtype=np.int64))
    counts = np.bincount(labels[valid])
    biggest = int(np.argmax(counts))            # ties pick the lowest label id
    keep = np.nonzero(labels == biggest)[0]
    return cloud.select(keep)


def extract_roi(cloud: PointCloud, roi: RoiLabel) -> np.ndarray:
    """Indices of points inside the closed box of a label."""
    inside = np.all((cloud.points >= roi.box_min) & (cloud.points <= roi.box_max), axis=1)
    return np.nonzero(inside)[0]
