"""Coarse transformation stage: a U-shaped windowed-attention network.

Points are serialized along space-filling curves, grouped into fixed-size
windows, and mixed by multi-head scalar attention with a grid-conditioned
positional encoding added before each block. Window pooling (feature max,
position mean over serialized runs) downsamples between encoder levels and
exact membership records drive the decoder's unpooling. A zero-initialized
head maps the decoded features plus pointwise noise to per-point offsets, so
an untrained stage is exactly the identity on coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nnauto, sfc
from .cloud import PointCloud
from .errors import RecordMismatch, ShapeMismatch
from .nnauto import (MLP, Linear, ParamSet, Value, concat, constant, linear,
                     matmul, reshape, softmax_rows, take_rows, transpose, vmax)


@dataclass(frozen=True)
class StageConfig:
    """Channel/head/block schedules for both U-net arms plus window settings."""

    enc_channels: tuple[int, ...]
    enc_heads: tuple[int, ...]
    enc_blocks: tuple[int, ...]
    dec_channels: tuple[int, ...]
    dec_heads: tuple[int, ...]
    dec_blocks: tuple[int, ...]
    window_size: int
    grid_size: float
    pool_stride: int = 4
    noise_channels: int = 16
    linear_mlps: bool = False   # single-linear MLPs (kink-free gradient checks)

    def __post_init__(self):
        L = len(self.enc_channels)
        if not (len(self.enc_heads) == len(self.enc_blocks) == L):
            raise ShapeMismatch("encoder schedule lists must share length")
        if not (len(self.dec_channels) == len(self.dec_heads) == len(self.dec_blocks) == max(L - 1, 0)):
            raise ShapeMismatch("decoder schedule lists must have len(enc) - 1 entries")
        for c, h in zip(self.enc_channels + self.dec_channels, self.enc_heads + self.dec_heads):
            if c % h:
                raise ShapeMismatch(f"head count {h} must divide channel width {c}")
        if self.window_size < 1 or self.grid_size <= 0 or self.pool_stride < 1:
            raise ShapeMismatch("window_size, grid_size and pool_stride must be positive")

    @property
    def levels(self) -> int:
        return len(self.enc_channels)

    @property
    def total_blocks(self) -> int:
        return sum(self.enc_blocks) + sum(self.dec_blocks)

    @property
    def out_channels(self) -> int:
        return self.dec_channels[0] if self.dec_channels else self.enc_channels[-1]


def desk_stage_config(noise_channels: int = 16) -> StageConfig:
    return StageConfig((16, 32, 64), (2, 4, 8), (1, 1, 1),
                       (16, 32), (2, 4), (1, 1),
                       window_size=128, grid_size=0.02,
                       noise_channels=noise_channels)


def paper_stage_config(noise_channels: int = 16) -> StageConfig:
    return StageConfig((32, 64, 128, 256, 512), (2, 4, 8, 16, 32), (2, 2, 2, 6, 2),
                       (64, 64, 128, 256), (4, 4, 8, 16), (2, 2, 2, 2),
                       window_size=1024, grid_size=0.01,
                       noise_channels=noise_channels)


# -- precomputed serialization structure ------------------------------------------


@dataclass
class LevelPattern:
    """Window layout of one level under one curve pattern."""

    order: sfc.SerialOrder
    win_indices: np.ndarray       # (m, S) point indices
    inv_slot: np.ndarray          # (n,) point -> owning flat slot
    xcpe_input: np.ndarray        # (n, 3) mean-centred cell offsets, coordinate units


@dataclass
class PoolRecord:
    """Membership of serialized runs pooled into one coarse point each."""

    member_of: np.ndarray         # (n_fine,)
    groups: np.ndarray            # (m, stride) fine indices, tail padded
    counts: np.ndarray            # (m,)
    fine_coords: np.ndarray
    coarse_coords: np.ndarray


@dataclass
class CoarseStructure:
    """All index bookkeeping of one input cloud under one block schedule."""

    level_coords: list[np.ndarray] = field(default_factory=list)
    level_patterns: list[dict] = field(default_factory=list)
    pools: list[PoolRecord] = field(default_factory=list)


def _level_pattern(coords: np.ndarray, grid_size: float, pattern: str, window_size: int) -> LevelPattern:
    order = sfc.serialize_cloud(PointCloud(coords), grid_size, pattern)
    s_eff = min(window_size, len(coords))
    part = sfc.partition_windows(order, s_eff)
    flat_idx = part.windows.reshape(-1)
    flat_keep = part.keep.reshape(-1)
    inv_slot = np.empty(len(coords), dtype=np.int64)
    inv_slot[flat_idx[flat_keep]] = np.nonzero(flat_keep)[0]
    centered = (order.cells - order.cells.mean(axis=0)) * grid_size
    return LevelPattern(order, part.windows, inv_slot, centered)


def _pool_record(coords: np.ndarray, order: sfc.SerialOrder, stride: int) -> PoolRecord:
    n = len(coords)
    m = (n + stride - 1) // stride
    starts = np.arange(0, n, stride)
    counts = np.minimum(stride, n - starts)
    serialized = order.perm
    groups = np.empty((m, stride), dtype=np.int64)
    for g in range(m):
        run = serialized[starts[g]: starts[g] + counts[g]]
        groups[g, : counts[g]] = run
        groups[g, counts[g]:] = run[-1]          # padding repeats the last member
    member_of = np.empty(n, dtype=np.int64)
    member_of[serialized] = np.repeat(np.arange(m), counts)
    sums = np.add.reduceat(coords[serialized], starts, axis=0)
    coarse = sums / counts[:, None]
    return PoolRecord(member_of, groups, counts, coords, coarse)


def build_structure(coords: np.ndarray, cfg: StageConfig, schedule: list[str]) -> CoarseStructure:
    """Serialize every level for every pattern its blocks will use."""
    plan = block_plan(cfg, schedule)
    per_level_patterns: dict[int, set] = {}
    for level, pattern in plan:
        per_level_patterns.setdefault(level, set()).add(pattern)

    st = CoarseStructure()
    cur = np.asarray(coords, dtype=np.float64)
    for level in range(cfg.levels):
        g = cfg.grid_size * (2.0 ** level)
        patterns = {}
        last_order = None
        for pattern in sfc.PATTERNS:
            if pattern in per_level_patterns.get(level, ()):
                lp = _level_pattern(cur, g, pattern, cfg.window_size)
                patterns[pattern] = lp
                last_order = lp.order
        if last_order is None:                    # level with zero blocks
            last_order = sfc.serialize_cloud(PointCloud(cur), g, sfc.PATTERNS[0])
        st.level_coords.append(cur)
        st.level_patterns.append(patterns)
        if level < cfg.levels - 1:
            enc_pats = [p for lv, p in plan[: sum(cfg.enc_blocks[: level + 1])] if lv == level]
            pool_order = patterns[enc_pats[-1]].order if enc_pats else last_order
            rec = _pool_record(cur, pool_order, cfg.pool_stride)
            st.pools.append(rec)
            cur = rec.coarse_coords
    return st


def block_plan(cfg: StageConfig, schedule: list[str]) -> list[tuple[int, str]]:
    """(level, pattern) per block, encoder levels ascending then decoder descending."""
    if len(schedule) != cfg.total_blocks:
        raise ShapeMismatch(f"schedule length {len(schedule)} != {cfg.total_blocks} blocks")
    plan = []
    it = iter(schedule)
    for level in range(cfg.levels):
        for _ in range(cfg.enc_blocks[level]):
            plan.append((level, next(it)))
    for level in range(cfg.levels - 2, -1, -1):
        for _ in range(cfg.dec_blocks[level]):
            plan.append((level, next(it)))
    return plan


# -- parameter groups ---------------------------------------------------------------


class AttentionBlockParams:
    """Projections, positional MLP and feed-forward MLP of one block."""

    def __init__(self, ps: ParamSet, name: str, channels: int, heads: int,
                 linear_mlps: bool = False):
        if channels % heads:
            raise ShapeMismatch(f"heads {heads} must divide channels {channels}")
        self.channels = channels
        self.heads = heads
        # bias-free projections: a key bias shifts every logit in a row equally,
        # which softmax ignores, leaving a parameter with identically zero grad
        self.wq = Linear(ps, f"{name}.q", channels, channels, bias=False)
        self.wk = Linear(ps, f"{name}.k", channels, channels, bias=False)
        self.wv = Linear(ps, f"{name}.v", channels, channels, bias=False)
        self.wo = Linear(ps, f"{name}.o", channels, channels)
        xcpe_widths = [channels] if linear_mlps else [channels, channels]
        self.xcpe_mlp = MLP(ps, f"{name}.xcpe", 3, xcpe_widths)
        mlp_widths = [channels] if linear_mlps else [2 * channels, channels]
        self.mlp = MLP(ps, f"{name}.mlp", channels, mlp_widths)


def xcpe(features: Value, cells: np.ndarray, mlp: MLP, grid_size: float) -> Value:
    """Residual positional encoding from mean-centred grid cell offsets."""
    cells = np.asarray(cells, dtype=np.float64)
    if cells.shape != (features.data.shape[0], 3):
        raise ShapeMismatch(f"cells {cells.shape} vs features {features.data.shape}")
    centered = (cells - cells.mean(axis=0)) * grid_size
    return features + mlp(constant(centered))


def scalar_attention(window_features: Value, params: AttentionBlockParams) -> Value:
    """Multi-head scalar attention over one window of S points."""
    s, c = window_features.data.shape
    if c != params.channels:
        raise ShapeMismatch(f"features have {c} channels, block expects {params.channels}")
    out = _windowed_attention(reshape(window_features, (1, s, c)), params)
    return reshape(out, (s, c))


def _windowed_attention(xw: Value, params: AttentionBlockParams) -> Value:
    """Batched attention over (m, S, c) windows; output has the same shape."""
    m, s, c = xw.data.shape
    h = params.heads
    ca = c // h
    flat = reshape(xw, (m * s, c))

    def split_heads(v: Value) -> Value:
        return transpose(reshape(v, (m, s, h, ca)), (0, 2, 1, 3))

    q = split_heads(params.wq(flat))
    k = split_heads(params.wk(flat))
    v = split_heads(params.wv(flat))
    logits = nnauto.scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(ca))
    attn = softmax_rows(logits)
    mixed = matmul(attn, v)                                  # (m, h, s, ca)
    merged = reshape(transpose(mixed, (0, 2, 1, 3)), (m * s, c))
    return reshape(params.wo(merged), (m, s, c))


def attention_block(features: Value, lp: LevelPattern, params: AttentionBlockParams,
                    grid_size: float) -> Value:
    """xCPE, windowed attention and feed-forward, each residually added."""
    x = features + params.xcpe_mlp(constant(lp.xcpe_input))
    m, s = lp.win_indices.shape
    xw = reshape(take_rows(x, lp.win_indices.reshape(-1)), (m, s, params.channels))
    attn_flat = reshape(_windowed_attention(xw, params), (m * s, params.channels))
    x = x + take_rows(attn_flat, lp.inv_slot)
    return x + params.mlp(x)


def window_pool(features: Value, record: PoolRecord, u: Linear) -> Value:
    """Subset feature = componentwise max of projected members."""
    projected = u(features)
    grouped = take_rows(projected, record.groups)            # (m, stride, c')
    return vmax(grouped, axis=1)


def window_unpool(pooled: Value, record: PoolRecord, skip: Value, proj: Linear) -> Value:
    """Broadcast subset features back to members, concat skip, project."""
    if pooled.data.shape[0] != len(record.counts):
        raise RecordMismatch(f"pooled rows {pooled.data.shape[0]} vs record {len(record.counts)}")
    if skip.data.shape[0] != len(record.member_of):
        raise RecordMismatch(f"skip rows {skip.data.shape[0]} vs record {len(record.member_of)}")
    up = take_rows(pooled, record.member_of)
    return proj(concat([up, skip], axis=-1))


class CoarseStage:
    """Full U-shaped encoder/decoder with a zero-initialized offset head."""

    def __init__(self, ps: ParamSet, name: str, cfg: StageConfig, schedule: list[str]):
        self.cfg = cfg
        self.schedule = list(schedule)
        self.plan = block_plan(cfg, schedule)
        self.embed = Linear(ps, f"{name}.embed", 3 + cfg.noise_channels, cfg.enc_channels[0])
        self.enc_blocks = []
        for level in range(cfg.levels):
            blocks = [AttentionBlockParams(ps, f"{name}.enc{level}.b{b}",
                                           cfg.enc_channels[level], cfg.enc_heads[level],
                                           cfg.linear_mlps)
                      for b in range(cfg.enc_blocks[level])]
            self.enc_blocks.append(blocks)
        self.pool_proj = [Linear(ps, f"{name}.pool{level}", cfg.enc_channels[level],
                                 cfg.enc_channels[level + 1], bias=False)
                          for level in range(cfg.levels - 1)]
        self.dec_proj = []
        self.dec_blocks = []
        below = cfg.enc_channels[-1] if cfg.levels > 1 else None
        for level in range(cfg.levels - 2, -1, -1):
            c_out = cfg.dec_channels[level]
            self.dec_proj.append(Linear(ps, f"{name}.up{level}",
                                        below + cfg.enc_channels[level], c_out))
            self.dec_blocks.append([AttentionBlockParams(ps, f"{name}.dec{level}.b{b}",
                                                         c_out, cfg.dec_heads[level],
                                                         cfg.linear_mlps)
                                    for b in range(cfg.dec_blocks[level])])
            below = c_out
        head_in = cfg.out_channels + cfg.noise_channels
        head_widths = [3] if cfg.linear_mlps else [cfg.out_channels, 3]
        self.head = MLP(ps, f"{name}.head", head_in, head_widths, zero_last=True)

    def forward(self, coords: np.ndarray, rng: np.random.Generator,
                structure: CoarseStructure | None = None) -> tuple[Value, Value]:
        """Returns (per-point offsets, decoded per-point features)."""
        cfg = self.cfg
        if structure is None:
            structure = build_structure(coords, cfg, self.schedule)
        x = nnauto.append_noise(constant(coords), cfg.noise_channels, rng)
        x = self.embed(x)
        plan_iter = iter(self.plan)
        skips = []
        for level in range(cfg.levels):
            g = cfg.grid_size * (2.0 ** level)
            for params in self.enc_blocks[level]:
                _, pattern = next(plan_iter)
                x = attention_block(x, structure.level_patterns[level][pattern], params, g)
            skips.append(x)
            if level < cfg.levels - 1:
                x = window_pool(x, structure.pools[level], self.pool_proj[level])
        for slot, level in enumerate(range(cfg.levels - 2, -1, -1)):
            g = cfg.grid_size * (2.0 ** level)
            x = window_unpool(x, structure.pools[level], skips[level], self.dec_proj[slot])
            for params in self.dec_blocks[slot]:
                _, pattern = next(plan_iter)
                x = attention_block(x, structure.level_patterns[level][pattern], params, g)
        f_global = x
        head_in = nnauto.append_noise(f_global, cfg.noise_channels, rng)
        phi = self.head(head_in)
        return phi, f_global


def coarse_forward(source: PointCloud, cfg: StageConfig, stage: CoarseStage,
                   seed: int) -> tuple[np.ndarray, np.ndarray, PointCloud]:
    """Standalone forward pass: offsets, features, and the moved cloud."""
    rng = np.random.default_rng(seed)
    phi, f_global = stage.forward(source.points, rng)
    moved = PointCloud(source.points + phi.data, id=source.id + ":coarse")
    return phi.data, f_global.data, moved
