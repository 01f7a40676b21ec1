"""Space-filling-curve serialization of point clouds.

Z-order (Morton) and Hilbert codes over quantized grid cells, their x/y
transposed variants, window partitioning of the serialized sequence, and the
seeded pattern schedule that assigns one curve variant to each attention
block. Codes stay within 63 bits (21 bits per axis), so plain int64 arrays
are safe throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .errors import CloudSmallerThanWindow, CoordinateOverflow, GridTooFine

PATTERNS = ("zorder", "zorder_trans", "hilbert", "hilbert_trans")
MAX_BITS = 21


@dataclass(frozen=True)
class SerialOrder:
    """Per-point curve codes and the permutation sorting points by code."""

    pattern: str
    codes: np.ndarray
    perm: np.ndarray
    cells: np.ndarray        # pre-transpose integer grid cells, (n, 3)
    grid_size: float


@dataclass(frozen=True)
class WindowPartition:
    """Equal-length runs of the serialized sequence.

    windows holds point indices, positions the serialized slots they came
    from. Only the final window may repeat indices (padding); keep marks the
    slots whose outputs represent their point (padded slots are context only).
    """

    window_size: int
    windows: np.ndarray      # (m, S) point indices
    positions: np.ndarray    # (m, S) serialized positions
    keep: np.ndarray         # (m, S) bool


def _spread21(x: np.ndarray) -> np.ndarray:
    x = x & 0x1FFFFF
    x = (x | (x << 32)) & 0x1F00000000FFFF
    x = (x | (x << 16)) & 0x1F0000FF0000FF
    x = (x | (x << 8)) & 0x100F00F00F00F00F
    x = (x | (x << 4)) & 0x10C30C30C30C30C3
    x = (x | (x << 2)) & 0x1249249249249249
    return x


def _compact21(x: np.ndarray) -> np.ndarray:
    x = x & 0x1249249249249249
    x = (x | (x >> 2)) & 0x10C30C30C30C30C3
    x = (x | (x >> 4)) & 0x100F00F00F00F00F
    x = (x | (x >> 8)) & 0x1F0000FF0000FF
    x = (x | (x >> 16)) & 0x1F00000000FFFF
    x = (x | (x >> 32)) & 0x1FFFFF
    return x


def _check_cells(cells: np.ndarray, bits: int) -> np.ndarray:
    cells = np.asarray(cells, dtype=np.int64)
    if bits > MAX_BITS:
        raise CoordinateOverflow(f"bits_per_axis={bits} exceeds {MAX_BITS}")
    if cells.size and (cells.min() < 0 or cells.max() >= (1 << bits)):
        raise CoordinateOverflow(f"cell coordinates outside [0, 2^{bits})")
    return cells


def morton_encode(cells: np.ndarray, bits_per_axis: int) -> np.ndarray:
    """Interleave bits: bit j of x lands on code bit 3j, y on 3j+1, z on 3j+2."""
    c = _check_cells(cells, bits_per_axis)
    flat = c.reshape(-1, 3)
    code = _spread21(flat[:, 0]) | (_spread21(flat[:, 1]) << 1) | (_spread21(flat[:, 2]) << 2)
    return code.reshape(c.shape[:-1])


def morton_decode(codes: np.ndarray, bits_per_axis: int) -> np.ndarray:
    if bits_per_axis > MAX_BITS:
        raise CoordinateOverflow(f"bits_per_axis={bits_per_axis} exceeds {MAX_BITS}")
    codes = np.asarray(codes, dtype=np.int64)
    flat = codes.reshape(-1)
    out = np.stack([_compact21(flat), _compact21(flat >> 1), _compact21(flat >> 2)], axis=-1)
    return out.reshape(codes.shape + (3,))


def hilbert_encode(cells: np.ndarray, bits_per_axis: int) -> np.ndarray:
    """3D Hilbert index via the transpose/Gray-code construction.

    The per-axis words are folded into curve-local form one bit plane at a
    time (high to low), Gray-coded, and finally interleaved with axis 0 as
    the most significant bit of each 3-bit group.
    """
    c = _check_cells(cells, bits_per_axis)
    x = c.reshape(-1, 3).T.copy()               # (3, n)
    m = 1 << (bits_per_axis - 1)
    q = m
    while q > 1:
        p = q - 1
        for i in range(3):
            high = (x[i] & q) != 0
            t = (x[0] ^ x[i]) & p
            x[0] = np.where(high, x[0] ^ p, x[0] ^ t)
            x[i] = np.where(high, x[i], x[i] ^ t)
        q >>= 1
    x[1] ^= x[0]
    x[2] ^= x[1]
    t = np.zeros_like(x[0])
    q = m
    while q > 1:
        t = np.where((x[2] & q) != 0, t ^ (q - 1), t)
        q >>= 1
    x ^= t
    code = _spread21(x[2]) | (_spread21(x[1]) << 1) | (_spread21(x[0]) << 2)
    return code.reshape(c.shape[:-1])


def hilbert_decode(codes: np.ndarray, bits_per_axis: int) -> np.ndarray:
    if bits_per_axis > MAX_BITS:
        raise CoordinateOverflow(f"bits_per_axis={bits_per_axis} exceeds {MAX_BITS}")
    codes = np.asarray(codes, dtype=np.int64)
    flat = codes.reshape(-1)
    x = np.stack([_compact21(flat >> 2), _compact21(flat >> 1), _compact21(flat)])
    n = 2 << (bits_per_axis - 1)
    t = x[2] >> 1
    x[2] ^= x[1]
    x[1] ^= x[0]
    x[0] ^= t
    q = 2
    while q != n:
        p = q - 1
        for i in (2, 1, 0):
            high = (x[i] & q) != 0
            tt = (x[0] ^ x[i]) & p
            x[0] = np.where(high, x[0] ^ p, x[0] ^ tt)
            x[i] = np.where(high, x[i], x[i] ^ tt)
        q <<= 1
    return x.T.reshape(codes.shape + (3,))


_ENCODERS = {
    "zorder": (morton_encode, False),
    "zorder_trans": (morton_encode, True),
    "hilbert": (hilbert_encode, False),
    "hilbert_trans": (hilbert_encode, True),
}


def quantize(points: np.ndarray, grid_size: float) -> np.ndarray:
    """floor((p - min) / g) per axis; cells are relative to the cloud minimum."""
    lo = points.min(axis=0)
    return np.floor((points - lo) / grid_size).astype(np.int64)


def serialize_cloud(cloud: PointCloud, grid_size: float, pattern: str) -> SerialOrder:
    """Quantize to grid cells, encode with the chosen curve, sort by code.

    Transposed patterns swap x and y before encoding. Equal codes keep the
    original index order, so the permutation is fully deterministic.
    """
    if pattern not in _ENCODERS:
        raise ValueError(f"unknown pattern {pattern!r}, expected one of {PATTERNS}")
    if grid_size <= 0:
        raise GridTooFine("grid_size must be positive")
    cells = quantize(cloud.points, grid_size)
    max_cell = int(cells.max()) if cells.size else 0
    bits = max(max_cell.bit_length(), 1)
    if bits > MAX_BITS:
        raise GridTooFine(f"grid needs {bits} bits per axis, limit is {MAX_BITS}")
    encode, swap_xy = _ENCODERS[pattern]
    enc_cells = cells[:, (1, 0, 2)] if swap_xy else cells
    codes = encode(enc_cells, bits)
    perm = np.lexsort((np.arange(len(codes)), codes))
    return SerialOrder(pattern, codes, perm, cells, float(grid_size))


def partition_windows(order: SerialOrder, window_size: int) -> WindowPartition:
    """Split the serialized sequence into runs of exactly window_size slots.

    When the tail is short, the final window is padded in front with the
    closing slots of the previous window, preserving serial order; padded
    slots are flagged so their outputs can be dropped downstream.
    """
    n = len(order.perm)
    s = window_size
    if s < 1:
        raise CloudSmallerThanWindow("window size must be at least 1")
    if n < s:
        raise CloudSmallerThanWindow(f"cloud of {n} points is smaller than window {s}")
    full = n // s
    rem = n - full * s
    rows = [np.arange(i * s, (i + 1) * s) for i in range(full)]
    keep = [np.ones(s, dtype=bool) for _ in range(full)]
    if rem:
        rows.append(np.arange(n - s, n))
        k = np.zeros(s, dtype=bool)
        k[s - rem:] = True
        keep.append(k)
    positions = np.stack(rows)
    return WindowPartition(s, order.perm[positions], positions, np.stack(keep))


def order_schedule(depth: int, seed: int) -> list[str]:
    """Seeded shuffle of the four patterns, cycled out to one entry per block."""
    if depth < 1:
        raise ValueError("depth must be at least 1")
    rng = np.random.default_rng(seed)
    shuffled = [PATTERNS[i] for i in rng.permutation(len(PATTERNS))]
    return [shuffled[i % len(shuffled)] for i in range(depth)]
