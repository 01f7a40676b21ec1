"""Similarity losses and evaluation metrics for paired point clouds.

Chamfer distance, exact and auction-approximated earth mover's distance,
cross-regularization, the neighbourhood density loss, the optional ROI loss,
Hausdorff distance, voxel-occupancy Jensen-Shannon divergence, a multiscale
neighbourhood discrepancy score, and the Wilcoxon rank-sum test.

Every loss accepts plain arrays, PointCloud, or autodiff Values; whenever a
Value is involved the result is a Value whose gradient flows through the
matched pairs (nearest neighbours, optimal matchings, and neighbourhood
selections are treated as locally constant).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nnauto
from .assignment import auction_assignment, solve_assignment_batch, solve_assignment_exact
from .cloud import PointCloud, cross_knn, knn_graph, _pairwise_sq
from .errors import EmptyCloud, KTooLarge, MissingLabel, NonFinite, SizeMismatch, TooFewSamples
from .nnauto import Value, constant, take_rows, norm_rows, vmean, vsum, absolute

_BLOCK = 1024


@dataclass(frozen=True)
class LossWeights:
    """Weights of the total training loss."""

    lam: float = 0.3          # cross-regularization weight
    beta: float = 0.1         # neighbourhood EMD weight inside the local loss
    aux_enabled: bool = False

    def __post_init__(self):
        if self.lam < 0 or self.beta < 0:
            raise NonFinite("loss weights must be nonnegative")


def _as_points(x) -> tuple[np.ndarray, Value | None]:
    if isinstance(x, Value):
        return x.data, x
    if isinstance(x, PointCloud):
        return x.points, None
    return np.asarray(x, dtype=np.float64), None


def _require_nonempty(*arrays):
    for a in arrays:
        if a.shape[0] == 0:
            raise EmptyCloud("metric requires nonempty clouds")


def _nearest_indices(a: np.ndarray, b: np.ndarray, fast: bool = False) -> np.ndarray:
    """argmin_j ||a_i - b_j|| per row, lowest index on ties, blocked in rows.

    With fast=True the scoring runs in float32 (training-path selection only;
    distances fed to losses are always recomputed in float64 from the chosen
    indices). Metric calls keep exact float64 scoring.
    """
    if fast:
        a = a.astype(np.float32)
        b = b.astype(np.float32)
    out = np.empty(len(a), dtype=np.int64)
    nb = (b * b).sum(axis=1)
    for lo in range(0, len(a), _BLOCK):
        block = a[lo: lo + _BLOCK]
        d2 = block @ b.T
        d2 *= -2.0
        d2 += nb[None, :]
        out[lo: lo + _BLOCK] = np.argmin(d2, axis=1)
    return out


def _nn_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    idx = _nearest_indices(a, b)
    return np.sqrt(((a - b[idx]) ** 2).sum(axis=1))


def _matched_mean(xd, xv, yd, yv, idx) -> Value | float:
    """Mean ||x_i - y_idx[i]||, differentiable when either side is a Value."""
    if xv is None and yv is None:
        return float(np.sqrt(((xd - yd[idx]) ** 2).sum(axis=1)).mean())
    xval = xv if xv is not None else constant(xd)
    yval = yv if yv is not None else constant(yd)
    return vmean(norm_rows(xval - take_rows(yval, idx)))


def chamfer(x, y):
    """Symmetric mean nearest-neighbour distance (unsquared Euclidean)."""
    xd, xv = _as_points(x)
    yd, yv = _as_points(y)
    _require_nonempty(xd, yd)
    fast = xv is not None or yv is not None
    t1 = _matched_mean(xd, xv, yd, yv, _nearest_indices(xd, yd, fast))
    t2 = _matched_mean(yd, yv, xd, xv, _nearest_indices(yd, xd, fast))
    if isinstance(t1, Value) or isinstance(t2, Value):
        return nnauto.add(t1, t2)
    return t1 + t2


def emd(x, y, mode: str = "auto"):
    """Mean distance under the optimal point-to-point bijection.

    exact solves the assignment with the shortest-augmenting-path solver;
    approx runs the epsilon-scaled auction with a certified gap of at most
    1 percent. auto picks exact up to 512 points and the auction beyond.
    """
    xd, xv = _as_points(x)
    yd, yv = _as_points(y)
    _require_nonempty(xd, yd)
    if len(xd) != len(yd):
        raise SizeMismatch(f"emd needs equal sizes, got {len(xd)} vs {len(yd)}")
    if mode not in ("auto", "exact", "approx"):
        raise ValueError(f"unknown emd mode {mode!r}")
    n = len(xd)
    use_exact = mode == "exact" or (mode == "auto" and n <= 512)
    cost = np.sqrt(_pairwise_sq(xd, yd))
    if use_exact:
        cols, _ = solve_assignment_exact(cost)
    else:
        cols, _, _ = auction_assignment(cost, rel_gap=0.01)
    return _matched_mean(xd, xv, yd, yv, cols)


def hausdorff(x, y) -> float:
    """max(sup_x inf_y d, sup_y inf_x d), the symmetric Hausdorff distance."""
    xd, _ = _as_points(x)
    yd, _ = _as_points(y)
    _require_nonempty(xd, yd)
    return float(max(_nn_distances(xd, yd).max(), _nn_distances(yd, xd).max()))


def similarity_losses(hhat_f, hhat_b, h_f, h_b, p_f, p_b):
    """Stage-wise similarity: Chamfer of each prediction against its target."""
    coarse = nnauto.add(chamfer(hhat_f, p_f), chamfer(hhat_b, p_b)) \
        if _any_value(hhat_f, hhat_b) else chamfer(hhat_f, p_f) + chamfer(hhat_b, p_b)
    fine = nnauto.add(chamfer(h_f, p_f), chamfer(h_b, p_b)) \
        if _any_value(h_f, h_b) else chamfer(h_f, p_f) + chamfer(h_b, p_b)
    return coarse, fine


def _any_value(*xs) -> bool:
    return any(isinstance(v, Value) for v in xs)


def _cat(a, b):
    ad, av = _as_points(a)
    bd, bv = _as_points(b)
    if av is None and bv is None:
        return np.concatenate([ad, bd], axis=0)
    return nnauto.concat([av if av is not None else constant(ad),
                          bv if bv is not None else constant(bd)], axis=0)


def cross_reg(p_f, p_b, hhat_f, hhat_b, h_f, h_b):
    """Chamfer between cross-direction concatenations, coupling both fields."""
    term1 = chamfer(_cat(p_f, hhat_b), _cat(p_b, hhat_f))
    term2 = chamfer(_cat(p_f, h_b), _cat(p_b, h_f))
    if _any_value(term1, term2):
        return nnauto.add(term1, term2)
    return term1 + term2


def local_density_loss(p, h, k: int = 16, beta: float = 0.1,
                       queries: np.ndarray | None = None,
                       own_neighbors: np.ndarray | None = None):
    """Neighbourhood spectrum and density discrepancy between target and prediction.

    For every target point x: its k nearest target neighbours and the k
    nearest prediction points around the probe position (x by default) are
    paired rank by rank; the first term averages |d(x, y_r) - d(q, z_r)|. The
    second term is the exact earth mover's distance between the two
    neighbourhoods, weighted by beta. Points of the prediction lying exactly
    on the probe are excluded, so a perfect prediction scores zero.
    """
    pd, _ = _as_points(p)
    hd, hv = _as_points(h)
    n = len(pd)
    if k >= n or k >= len(hd):
        raise KTooLarge(f"k={k} too large for clouds of {n} and {len(hd)} points")
    probes = pd if queries is None else np.asarray(queries, dtype=np.float64)
    if own_neighbors is None:
        own_neighbors = knn_graph(pd, k)
    d_own = np.sqrt(((pd[:, None, :] - pd[own_neighbors]) ** 2).sum(axis=2))

    cross_idx = _cross_knn_excluding(probes, hd, k, fast=hv is not None)
    p_nb = pd[own_neighbors]                       # (n, k, 3)
    h_nb_np = hd[cross_idx]
    d_cross_np = np.sqrt(((probes[:, None, :] - h_nb_np) ** 2).sum(axis=2))

    # rank-paired matching for the EMD term
    costs = np.sqrt(((p_nb[:, :, None, :] - h_nb_np[:, None, :, :]) ** 2).sum(axis=3))
    cols = solve_assignment_batch(costs)
    matched_idx = np.take_along_axis(cross_idx, cols, axis=1)

    if hv is None:
        term1 = float(np.abs(d_own - d_cross_np).mean())
        term2 = float(np.sqrt(((p_nb - hd[matched_idx]) ** 2).sum(axis=2)).mean())
        return term1 + beta * term2
    probes_c = constant(probes[:, None, :])
    d_cross = norm_rows(nnauto.add(probes_c, nnauto.scale(take_rows(hv, cross_idx), -1.0)))
    term1 = vmean(absolute(nnauto.add(constant(d_own), nnauto.scale(d_cross, -1.0))))
    matched = take_rows(hv, matched_idx)
    term2 = vmean(norm_rows(nnauto.add(constant(p_nb), nnauto.scale(matched, -1.0))))
    return nnauto.add(term1, nnauto.scale(term2, beta))


def _cross_knn_excluding(queries: np.ndarray, points: np.ndarray, k: int,
                         fast: bool = False) -> np.ndarray:
    """Cross kNN that skips points sitting exactly on their query."""
    if fast:
        idx = cross_knn(queries.astype(np.float32), points.astype(np.float32),
                        min(k + 1, len(points)))
    else:
        idx = cross_knn(queries, points, min(k + 1, len(points)))
    d0 = np.sqrt(((queries - points[idx[:, 0]]) ** 2).sum(axis=1))
    exact = d0 == 0.0
    out = idx[:, :k].copy()
    if exact.any():
        if idx.shape[1] < k + 1:
            raise KTooLarge(f"k={k} leaves no room to exclude coincident points")
        out[exact] = idx[exact, 1:k + 1]
    return out


def aux_roi_loss(roi_sets: dict, p_f, p_b, phi_f2b, phi_b2f):
    """Mean Chamfer between labelled regions and their warped counterparts.

    roi_sets maps label name to {'face': indices, 'bone': indices}; the
    displacement fields are the full composed per-point offsets.
    """
    if not roi_sets:
        raise MissingLabel("aux loss needs at least one labelled region")
    pf_d, _ = _as_points(p_f)
    pb_d, _ = _as_points(p_b)
    warped_b = _warp(p_f, phi_f2b)    # face points moved toward the bone side
    warped_f = _warp(p_b, phi_b2f)
    terms = []
    for name in sorted(roi_sets):
        sides = roi_sets[name]
        if "face" not in sides or "bone" not in sides:
            raise MissingLabel(f"roi {name!r} must be labelled on both sides")
        fi = np.asarray(sides["face"], dtype=np.int64)
        bi = np.asarray(sides["bone"], dtype=np.int64)
        if fi.size == 0 or bi.size == 0:
            raise MissingLabel(f"roi {name!r} has an empty side")
        terms.append(chamfer(_rows(p_b, bi, pb_d), _rows(warped_b, fi)))
        terms.append(chamfer(_rows(p_f, fi, pf_d), _rows(warped_f, bi)))
    if _any_value(*terms):
        acc = terms[0]
        for t in terms[1:]:
            acc = nnauto.add(acc, t)
        return nnauto.scale(acc, 1.0 / len(roi_sets))
    return float(sum(terms) / len(roi_sets))


def _warp(points, phi):
    pd, pv = _as_points(points)
    fd, fv = _as_points(phi)
    if pv is None and fv is None:
        return pd + fd
    a = pv if pv is not None else constant(pd)
    b = fv if fv is not None else constant(fd)
    return nnauto.add(a, b)


def _rows(x, idx, np_data=None):
    if isinstance(x, Value):
        return take_rows(x, idx)
    data = np_data if np_data is not None else _as_points(x)[0]
    return data[idx]


@dataclass
class LossParts:
    """Individual terms of the training objective, Values or floats."""

    coarse: object
    fine: object
    reg: object
    local: object
    aux: object | None = None


def total_loss(parts: LossParts, weights: LossWeights):
    """coarse + fine + lam * reg + local (+ aux when enabled)."""
    items = [parts.coarse, parts.fine, parts.reg, parts.local]
    if weights.aux_enabled:
        if parts.aux is None:
            raise MissingLabel("aux enabled but no aux term supplied")
        items.append(parts.aux)
    for it in items:
        data = it.data if isinstance(it, Value) else it
        if not np.isfinite(data).all():
            raise NonFinite("loss term is not finite")
    if _any_value(*items):
        total = nnauto.add(_val(parts.coarse), _val(parts.fine))
        total = nnauto.add(total, nnauto.scale(_val(parts.reg), weights.lam))
        total = nnauto.add(total, _val(parts.local))
        if weights.aux_enabled:
            total = nnauto.add(total, _val(parts.aux))
        return total
    total = parts.coarse + parts.fine + weights.lam * parts.reg + parts.local
    if weights.aux_enabled:
        total += parts.aux
    return total


def _val(x) -> Value:
    return x if isinstance(x, Value) else constant(x)


def jsd(x, y, grid: int = 28) -> float:
    """Jensen-Shannon divergence of voxel-occupancy histograms on [-1, 1]^3."""
    xd, _ = _as_points(x)
    yd, _ = _as_points(y)
    _require_nonempty(xd, yd)
    p = _occupancy(xd, grid)
    q = _occupancy(yd, grid)
    m = 0.5 * (p + q)
    return float(0.5 * _kl(p, m) + 0.5 * _kl(q, m))


def _occupancy(points: np.ndarray, grid: int) -> np.ndarray:
    cells = np.clip(np.floor((points + 1.0) * (grid / 2.0)).astype(np.int64), 0, grid - 1)
    flat = (cells[:, 0] * grid + cells[:, 1]) * grid + cells[:, 2]
    counts = np.bincount(flat, minlength=grid ** 3).astype(np.float64)
    return counts / counts.sum()


def _kl(p: np.ndarray, m: np.ndarray) -> float:
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / m[mask])).sum())


def mped(x, y, scales: tuple[int, ...] = (1, 4, 8, 16)) -> float:
    """Multiscale neighbourhood-distance discrepancy.

    At each scale K the per-point mean distance to the K nearest own-cloud
    points (self included, so the K=1 term is zero) is compared with the mean
    distance to the K nearest other-cloud points; the absolute differences
    are averaged over points, symmetrized over the two clouds, and summed
    over scales. Zero exactly when the clouds coincide.
    """
    xd, _ = _as_points(x)
    yd, _ = _as_points(y)
    _require_nonempty(xd, yd)
    usable = [k for k in scales if k <= min(len(xd), len(yd))]
    if not usable:
        raise KTooLarge(f"no usable scales from {scales} for sizes {len(xd)}, {len(yd)}")
    kmax = max(usable)
    total = 0.0
    for a, b in ((xd, yd), (yd, xd)):
        d_own = _sorted_knn_dists(a, a, kmax)
        d_cross = _sorted_knn_dists(a, b, kmax)
        for k in usable:
            total += float(np.abs(d_own[:, :k].mean(axis=1) - d_cross[:, :k].mean(axis=1)).mean())
    return total


def _sorted_knn_dists(queries: np.ndarray, points: np.ndarray, k: int) -> np.ndarray:
    idx = cross_knn(queries, points, k)
    return np.sqrt(((queries[:, None, :] - points[idx]) ** 2).sum(axis=2))


def ranksum_test(a, b) -> float:
    """Two-sided Wilcoxon rank-sum p-value, normal approximation, tie-corrected."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 5 or len(b) < 5:
        raise TooFewSamples("rank-sum test needs at least 5 samples per side")
    n1, n2 = len(a), len(b)
    combined = np.concatenate([a, b])
    order = np.argsort(combined, kind="stable")
    ranks = np.empty(len(combined), dtype=np.float64)
    sorted_vals = combined[order]
    i = 0
    tie_term = 0.0
    while i < len(sorted_vals):
        j = i
        while j < len(sorted_vals) and sorted_vals[j] == sorted_vals[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0
        t = j - i
        tie_term += t ** 3 - t
        i = j
    r1 = ranks[:n1].sum()
    u1 = r1 - n1 * (n1 + 1) / 2.0
    mu = n1 * n2 / 2.0
    n = n1 + n2
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        return 1.0
    z = (u1 - mu) / math.sqrt(var)
    return math.erfc(abs(z) / math.sqrt(2.0))


# -- reporting ---------------------------------------------------------------------


@dataclass
class MetricRow:
    pair_id: str
    shape: str                 # face | bone | all
    roi: str | None
    mped: float | None
    cd: float | None
    emd: float | None
    jsd: float | None
    hd: float | None


_METRICS = ("mped", "cd", "emd", "jsd", "hd")


@dataclass
class MetricReport:
    """Per-sample metric rows with aggregate statistics and table output."""

    rows: list[MetricRow] = field(default_factory=list)

    def add(self, row: MetricRow) -> None:
        self.rows.append(row)

    def values(self, metric: str, shape: str, roi: str | None = None) -> np.ndarray:
        vals = [getattr(r, metric) for r in self.rows
                if r.shape == shape and r.roi == roi and getattr(r, metric) is not None]
        return np.asarray(vals, dtype=np.float64)

    def aggregate(self, metric: str, shape: str, roi: str | None = None) -> tuple[float, float]:
        vals = self.values(metric, shape, roi)
        if vals.size == 0:
            return math.nan, math.nan
        return float(vals.mean()), float(vals.std())

    def to_csv(self) -> str:
        lines = ["pair_id,shape,roi," + ",".join(_METRICS)]
        for r in self.rows:
            cells = [r.pair_id, r.shape, r.roi or ""]
            cells += ["" if getattr(r, m) is None else f"{getattr(r, m):.9g}" for m in _METRICS]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        shapes = []
        for r in self.rows:
            key = (r.shape, r.roi)
            if key not in shapes:
                shapes.append(key)
        header = f"{'Shape':<14}" + "".join(f"{m.upper():>18}" for m in _METRICS)
        lines = [header, "-" * len(header)]
        for shape, roi in shapes:
            label = shape if roi is None else f"{shape}/{roi}"
            cells = [f"{label:<14}"]
            for m in _METRICS:
                mean, std = self.aggregate(m, shape, roi)
                cells.append(f"{'':>18}" if math.isnan(mean) else f"{mean:>10.4f}±{std:<7.4f}")
            lines.append("".join(cells))
        return "\n".join(lines) + "\n"
