"""Linear assignment solvers for optimal point-to-point matching.

The exact solver is a dense shortest-augmenting-path method with dual
potentials (Jonker-Volgenant style, O(n^3)); the approximate solver is a
forward auction with epsilon scaling that certifies its relative gap. Both
are plain Python kernels compiled with numba when available, with identical
semantics either way.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit
except ImportError:                               # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


@njit(cache=True)
def _lap_augment(cost, row_to_col, col_to_row, u, v):
    """Solve the dense LAP by one shortest augmenting path per row.

    Maintains dual feasibility (u[i] + v[j] <= cost[i, j]) and augments along
    the shortest path in the reduced-cost graph found by a Dijkstra sweep over
    columns. Ties on path length prefer free columns, then lower index.
    """
    n = cost.shape[0]
    inf = np.inf
    shortest = np.empty(n, dtype=np.float64)
    col_seen = np.empty(n, dtype=np.bool_)
    pred_row = np.empty(n, dtype=np.int64)
    for cur_row in range(n):
        for j in range(n):
            shortest[j] = inf
            col_seen[j] = False
            pred_row[j] = -1
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            lowest = inf
            index = -1
            for j in range(n):
                if col_seen[j]:
                    continue
                r = min_val + cost[i, j] - u[i] - v[j]
                if r < shortest[j]:
                    shortest[j] = r
                    pred_row[j] = i
                if shortest[j] < lowest or (shortest[j] == lowest and index >= 0
                                            and col_to_row[j] == -1 and col_to_row[index] != -1):
                    lowest = shortest[j]
                    index = j
            j = index
            min_val = lowest
            col_seen[j] = True
            if col_to_row[j] == -1:
                sink = j
            else:
                i = col_to_row[j]
        # dual update over scanned columns keeps reduced costs nonnegative
        u[cur_row] += min_val
        for j in range(n):
            if col_seen[j] and j != sink:
                row = col_to_row[j]
                u[row] += min_val - shortest[j]
                v[j] -= min_val - shortest[j]
        v[sink] -= min_val - shortest[sink]
        # augment: flip matched edges back along the predecessor chain
        j = sink
        while True:
            i = pred_row[j]
            col_to_row[j] = i
            j_next = row_to_col[i]
            row_to_col[i] = j
            if i == cur_row:
                break
            j = j_next


def solve_assignment_exact(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-cost perfect matching of a square cost matrix.

    Returns (col for each row, total cost).
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ValueError(f"cost must be square, got {cost.shape}")
    row_to_col = np.full(n, -1, dtype=np.int64)
    col_to_row = np.full(n, -1, dtype=np.int64)
    u = np.zeros(n, dtype=np.float64)
    v = np.zeros(n, dtype=np.float64)
    _lap_augment(cost, row_to_col, col_to_row, u, v)
    total = float(cost[np.arange(n), row_to_col].sum())
    return row_to_col, total


@njit(cache=True)
def _solve_batch(costs, out_cols):
    b, n, _ = costs.shape
    for s in range(b):
        row_to_col = np.full(n, -1, dtype=np.int64)
        col_to_row = np.full(n, -1, dtype=np.int64)
        u = np.zeros(n, dtype=np.float64)
        v = np.zeros(n, dtype=np.float64)
        _lap_augment(costs[s], row_to_col, col_to_row, u, v)
        out_cols[s] = row_to_col


def solve_assignment_batch(costs: np.ndarray) -> np.ndarray:
    """Exact matchings for a (b, n, n) stack of cost matrices; (b, n) columns."""
    costs = np.ascontiguousarray(costs, dtype=np.float64)
    b, n, m = costs.shape
    if n != m:
        raise ValueError(f"cost matrices must be square, got {costs.shape}")
    out = np.empty((b, n), dtype=np.int64)
    _solve_batch(costs, out)
    return out


@njit(cache=True)
def _auction_round(benefit, prices, row_to_col, col_to_row, eps):
    """One forward-auction sweep: every unassigned row bids for its best column."""
    n = benefit.shape[0]
    progress = False
    for i in range(n):
        if row_to_col[i] != -1:
            continue
        best_j = -1
        best_v = -np.inf
        second_v = -np.inf
        for j in range(n):
            val = benefit[i, j] - prices[j]
            if val > best_v:
                second_v = best_v
                best_v = val
                best_j = j
            elif val > second_v:
                second_v = val
        if second_v == -np.inf:
            second_v = best_v
        prices[best_j] += best_v - second_v + eps
        prev = col_to_row[best_j]
        if prev != -1:
            row_to_col[prev] = -1
        col_to_row[best_j] = i
        row_to_col[i] = best_j
        progress = True
    return progress


@njit(cache=True)
def _auction_solve(benefit, eps):
    n = benefit.shape[0]
    prices = np.zeros(n, dtype=np.float64)
    row_to_col = np.full(n, -1, dtype=np.int64)
    col_to_row = np.full(n, -1, dtype=np.int64)
    while eps > 1e-16:
        for i in range(n):
            row_to_col[i] = -1
        for j in range(n):
            col_to_row[j] = -1
        while True:
            assigned = 0
            for i in range(n):
                if row_to_col[i] != -1:
                    assigned += 1
            if assigned == n:
                break
            _auction_round(benefit, prices, row_to_col, col_to_row, eps)
        eps /= 4.0
    return row_to_col, eps * 4.0


def auction_assignment(cost: np.ndarray, rel_gap: float = 0.01) -> tuple[np.ndarray, float, float]:
    """Epsilon-scaled auction; certifies total cost within rel_gap of optimal.

    The final assignment satisfies eps-complementary slackness, so its total
    cost is within n*eps of the optimum. Epsilon is scaled down until n*eps
    is at most rel_gap times the certified lower bound (total - n*eps).
    Returns (col for each row, total cost, certified relative gap bound).
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ValueError(f"cost must be square, got {cost.shape}")
    benefit = -cost
    spread = float(benefit.max() - benefit.min())
    eps = max(spread, 1e-12) / 4.0
    while True:
        cols, final_eps = _auction_solve(benefit, eps)
        total = float(cost[np.arange(n), cols].sum())
        slack = n * final_eps
        lower = total - slack
        if lower > 0 and slack / lower <= rel_gap:
            return cols, total, slack / lower
        if total <= slack and slack <= rel_gap * max(abs(total), 1e-9) + 1e-12:
            return cols, total, rel_gap
        if final_eps <= 1e-15:
            return cols, total, slack / max(lower, 1e-15)
        eps = final_eps / 4.0
