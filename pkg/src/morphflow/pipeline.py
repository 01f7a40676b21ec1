"""End-to-end assembly: bidirectional model, training, evaluation, persistence.

The bidirectional model holds four independent parameter groups (one coarse
stage per direction, one refinement stage per output side) inside a single
ParamSet. Training minimizes the combined objective with Adam under a step
learning-rate schedule; every random draw flows from named seed sequences, so
a (seed, config, data) triple fully determines the loss curve and the saved
checkpoint digest.
"""

from __future__ import annotations

import ast
import hashlib
import json
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import distort, io as mfio, nnauto, sfc
from .cloud import (DisplacementField, PointCloud, RoiLabel, dbscan_filter,
                    extract_roi, farthest_point_sample, knn, knn_graph,
                    normalize, remove_statistical_outliers)
from .distort import LossParts, LossWeights, MetricReport, MetricRow
from .errors import (CorruptCheckpoint, EmptyAfterFiltering, NonFiniteLoss,
                     PresetMismatch, ShapeMismatch)
from .nnauto import ParamSet, Value, constant
from .stage1 import (CoarseStage, StageConfig, build_structure,
                     desk_stage_config, paper_stage_config)
from .stage2 import FineStage, LiaConfig
from .synth import SyntheticPair

CHECKPOINT_MAGIC = b"MFCK"
CHECKPOINT_VERSION = 1


# -- configuration ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule, loss weights and model preset selection."""

    preset: str = "desk"
    seed: int = 0
    epochs: int = 60
    batch_size: int = 2
    lr: float = 0.01
    lr_drop_epochs: tuple[int, ...] = (30, 45)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    k_local: int = 16
    k_lia: int = 8
    noise_channels: int = 16
    n_points: int = 1024
    coarse_only: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0:
            raise ShapeMismatch("epochs must be >= 1 and lr positive")


def resolve_model_configs(cfg: TrainConfig,
                          stage_overrides: dict | None = None,
                          lia_overrides: dict | None = None) -> tuple[StageConfig, LiaConfig]:
    if cfg.preset == "desk":
        stage = desk_stage_config(cfg.noise_channels)
        lia = LiaConfig(channels=32, k_neighbors=cfg.k_lia,
                        noise_channels=cfg.noise_channels)
    elif cfg.preset == "paper":
        stage = paper_stage_config(cfg.noise_channels)
        lia = LiaConfig(channels=64, k_neighbors=cfg.k_lia,
                        noise_channels=cfg.noise_channels)
    else:
        raise PresetMismatch(f"unknown preset {cfg.preset!r}")
    if stage_overrides:
        stage = replace(stage, **stage_overrides)
    if lia_overrides:
        lia = replace(lia, **lia_overrides)
    return stage, lia


def config_to_text(cfg: TrainConfig, stage: StageConfig, lia: LiaConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        if f.name == "weights":
            lines.append(f"weights.lam = {v.lam!r}")
            lines.append(f"weights.beta = {v.beta!r}")
            lines.append(f"weights.aux_enabled = {v.aux_enabled!r}")
        else:
            lines.append(f"{f.name} = {_fmt(v)}")
    for f in fields(StageConfig):
        lines.append(f"stage.{f.name} = {_fmt(getattr(stage, f.name))}")
    for f in fields(LiaConfig):
        lines.append(f"lia.{f.name} = {_fmt(getattr(lia, f.name))}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return repr(list(v))
    return repr(v)


def parse_config_text(text: str) -> dict:
    """key = value lines into a flat dict; values via literal_eval, else string."""
    out: dict = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ShapeMismatch(f"bad config line: {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = ast.literal_eval(val)
        except (ValueError, SyntaxError):
            out[key] = val
    return out


def config_from_entries(entries: dict) -> tuple[TrainConfig, dict, dict]:
    """Split flat entries into TrainConfig kwargs plus stage/lia override dicts."""
    train_kwargs: dict = {}
    weight_kwargs: dict = {}
    stage_over: dict = {}
    lia_over: dict = {}
    train_fields = {f.name for f in fields(TrainConfig)}
    tuple_fields = {"lr_drop_epochs"}
    stage_tuple_fields = {"enc_channels", "enc_heads", "enc_blocks",
                          "dec_channels", "dec_heads", "dec_blocks"}
    for key, val in entries.items():
        if key.startswith("weights."):
            weight_kwargs[key.split(".", 1)[1]] = val
        elif key.startswith("stage."):
            name = key.split(".", 1)[1]
            stage_over[name] = tuple(val) if name in stage_tuple_fields else val
        elif key.startswith("lia."):
            lia_over[key.split(".", 1)[1]] = val
        elif key in train_fields:
            train_kwargs[key] = tuple(val) if key in tuple_fields else val
        else:
            raise ShapeMismatch(f"unknown config key {key!r}")
    if weight_kwargs:
        train_kwargs["weights"] = LossWeights(**weight_kwargs)
    return TrainConfig(**train_kwargs), stage_over, lia_over


def config_from_text(text: str) -> tuple[TrainConfig, dict, dict]:
    return config_from_entries(parse_config_text(text))


# -- model ---------------------------------------------------------------------------


def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence(tuple(int(p) for p in parts)).generate_state(1)[0])


@dataclass
class ModelOutputs:
    """Raw Value outputs of one bidirectional forward pass."""

    hhat_f: Value
    hhat_b: Value
    h_f: Value
    h_b: Value
    phi_b2f_coarse: Value
    phi_f2b_coarse: Value
    phi_b2f_fine: Value | None
    phi_f2b_fine: Value | None
    f_global_f: Value
    f_global_b: Value


class BidirModel:
    """Two coarse stages (one per direction) and two refinement stages."""

    def __init__(self, cfg: TrainConfig, stage_cfg: StageConfig, lia_cfg: LiaConfig):
        self.cfg = cfg
        self.stage_cfg = stage_cfg
        self.lia_cfg = lia_cfg
        self.params = ParamSet(cfg.seed)
        n_blocks = stage_cfg.total_blocks
        self.schedule_f2b = sfc.order_schedule(n_blocks, _derived_seed(cfg.seed, 1))
        self.schedule_b2f = sfc.order_schedule(n_blocks, _derived_seed(cfg.seed, 2))
        self.s1_f2b = CoarseStage(self.params, "s1_f2b", stage_cfg, self.schedule_f2b)
        self.s1_b2f = CoarseStage(self.params, "s1_b2f", stage_cfg, self.schedule_b2f)
        self.s2_face = FineStage(self.params, "s2_face", lia_cfg, stage_cfg.out_channels)
        self.s2_bone = FineStage(self.params, "s2_bone", lia_cfg, stage_cfg.out_channels)

    def forward(self, p_f: np.ndarray, p_b: np.ndarray, rng: np.random.Generator,
                struct_f=None, struct_b=None, coarse_only: bool | None = None) -> ModelOutputs:
        """Run both directions; bone->face first, then face->bone."""
        if coarse_only is None:
            coarse_only = self.cfg.coarse_only
        phi_b2f, fg_b2f = self.s1_b2f.forward(p_b, rng, struct_b)
        hhat_f = constant(p_b) + phi_b2f
        phi_f2b, fg_f2b = self.s1_f2b.forward(p_f, rng, struct_f)
        hhat_b = constant(p_f) + phi_f2b
        if coarse_only:
            return ModelOutputs(hhat_f, hhat_b, hhat_f, hhat_b,
                                phi_b2f, phi_f2b, None, None, fg_b2f, fg_f2b)
        fine_f = self.s2_face.forward(hhat_f, fg_b2f, rng)
        fine_b = self.s2_bone.forward(hhat_b, fg_f2b, rng)
        return ModelOutputs(hhat_f, hhat_b, hhat_f + fine_f, hhat_b + fine_b,
                            phi_b2f, phi_f2b, fine_f, fine_b, fg_b2f, fg_f2b)


def model_forward(model: BidirModel, p_f: PointCloud, p_b: PointCloud, seed: int) -> dict:
    """Both directions as numpy arrays, composed fields included."""
    rng = np.random.default_rng(seed)
    out = model.forward(p_f.points, p_b.points, rng)
    phi_b2f = out.phi_b2f_coarse.data + (0 if out.phi_b2f_fine is None else out.phi_b2f_fine.data)
    phi_f2b = out.phi_f2b_coarse.data + (0 if out.phi_f2b_fine is None else out.phi_f2b_fine.data)
    return {
        "hhat_f": out.hhat_f.data, "hhat_b": out.hhat_b.data,
        "h_f": out.h_f.data, "h_b": out.h_b.data,
        "phi_b2f": DisplacementField(phi_b2f), "phi_f2b": DisplacementField(phi_f2b),
        "phi_b2f_coarse": DisplacementField(out.phi_b2f_coarse.data),
        "phi_f2b_coarse": DisplacementField(out.phi_f2b_coarse.data),
        "f_global_f": out.f_global_f.data, "f_global_b": out.f_global_b.data,
    }


# -- data preparation ----------------------------------------------------------------


@dataclass
class PreparedPair:
    """Normalized pair with cached index structures for fast training steps."""

    pair_id: str
    p_f: np.ndarray
    p_b: np.ndarray
    center_f: np.ndarray
    scale_f: float
    center_b: np.ndarray
    scale_b: float
    struct_f: object
    struct_b: object
    own_f: np.ndarray
    own_b: np.ndarray
    roi_sets: dict
    identity_cd: float


def prepare_pair(pair: SyntheticPair, model: BidirModel, cfg: TrainConfig) -> PreparedPair:
    face_n, center_f, scale_f = normalize(pair.face)
    bone_n, center_b, scale_b = normalize(pair.bone)
    roi_sets: dict = {}
    for roi in pair.rois:
        if roi.cloud_side == "face":
            cloud, center, scale = face_n, center_f, scale_f
        else:
            cloud, center, scale = bone_n, center_b, scale_b
        moved = RoiLabel(roi.name, (roi.box_min - center) / scale,
                         (roi.box_max - center) / scale, roi.cloud_side)
        roi_sets.setdefault(roi.name, {})[roi.cloud_side] = extract_roi(cloud, moved)
    return PreparedPair(
        pair_id=pair.face.id.split(":")[0],
        p_f=face_n.points, p_b=bone_n.points,
        center_f=center_f, scale_f=scale_f, center_b=center_b, scale_b=scale_b,
        struct_f=build_structure(face_n.points, model.stage_cfg, model.schedule_f2b),
        struct_b=build_structure(bone_n.points, model.stage_cfg, model.schedule_b2f),
        own_f=knn_graph(face_n.points, cfg.k_local),
        own_b=knn_graph(bone_n.points, cfg.k_local),
        roi_sets=roi_sets,
        identity_cd=distort.chamfer(face_n.points, bone_n.points),
    )


# -- loss assembly -------------------------------------------------------------------


def sample_loss(model: BidirModel, sample: PreparedPair, cfg: TrainConfig,
                rng: np.random.Generator) -> tuple[Value, dict]:
    out = model.forward(sample.p_f, sample.p_b, rng, sample.struct_f, sample.struct_b)
    coarse, fine = distort.similarity_losses(out.hhat_f, out.hhat_b, out.h_f, out.h_b,
                                             sample.p_f, sample.p_b)
    reg = distort.cross_reg(sample.p_f, sample.p_b, out.hhat_f, out.hhat_b,
                            out.h_f, out.h_b)
    local_f = distort.local_density_loss(sample.p_f, out.h_f, cfg.k_local,
                                         cfg.weights.beta, own_neighbors=sample.own_f)
    local_b = distort.local_density_loss(sample.p_b, out.h_b, cfg.k_local,
                                         cfg.weights.beta, own_neighbors=sample.own_b)
    local = nnauto.add(local_f, local_b)
    aux = None
    if cfg.weights.aux_enabled:
        phi_f2b = out.phi_f2b_coarse if out.phi_f2b_fine is None \
            else out.phi_f2b_coarse + out.phi_f2b_fine
        phi_b2f = out.phi_b2f_coarse if out.phi_b2f_fine is None \
            else out.phi_b2f_coarse + out.phi_b2f_fine
        aux = distort.aux_roi_loss(sample.roi_sets, sample.p_f, sample.p_b,
                                   phi_f2b, phi_b2f)
    parts = LossParts(coarse, fine, reg, local, aux)
    total = distort.total_loss(parts, cfg.weights)
    detail = {"coarse": float(coarse.data), "fine": float(fine.data),
              "reg": float(reg.data), "local": float(local.data),
              "aux": float(aux.data) if aux is not None else 0.0,
              "total": float(total.data)}
    return total, detail


# -- optimizer -----------------------------------------------------------------------


class Adam:
    def __init__(self, params: list[Value], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m += (1 - b1) * (g - m)
            v += (1 - b2) * (g * g - v)
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)


# -- training ------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: BidirModel
    curve: list[dict]
    prepared: list[PreparedPair]
    checkpoint_path: Path | None = None


def train_run(cfg: TrainConfig, pairs: list[SyntheticPair],
              out_dir: str | Path | None = None,
              stage_overrides: dict | None = None,
              lia_overrides: dict | None = None,
              progress: bool = False) -> TrainResult:
    """Minimize the combined objective over all four parameter groups jointly."""
    if len(pairs) < 2:
        raise ShapeMismatch("training needs at least 2 pairs")
    stage_cfg, lia_cfg = resolve_model_configs(cfg, stage_overrides, lia_overrides)
    model = BidirModel(cfg, stage_cfg, lia_cfg)
    prepared = [prepare_pair(p, model, cfg) for p in pairs]
    opt = Adam(model.params.values(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xD5)))
    train_rng_root = cfg.seed
    lr = cfg.lr
    curve: list[dict] = []
    out_path = Path(out_dir) if out_dir is not None else None
    ckpt_path = None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        if epoch in cfg.lr_drop_epochs:
            lr *= 0.1
        order = shuffle_rng.permutation(len(prepared))
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo: lo + cfg.batch_size]
            model.params.zero_grads()
            agg = {"coarse": 0.0, "fine": 0.0, "reg": 0.0, "local": 0.0,
                   "aux": 0.0, "total": 0.0}
            for pi in batch:
                rng = np.random.default_rng(
                    np.random.SeedSequence((train_rng_root, epoch, step, int(pi))))
                total, detail = sample_loss(model, prepared[pi], cfg, rng)
                if not np.isfinite(total.data):
                    raise NonFiniteLoss(f"epoch {epoch} step {step}: {detail}")
                nnauto.scale(total, 1.0 / len(batch)).backward()
                for k in agg:
                    agg[k] += detail[k] / len(batch)
            opt.step(lr)
            curve.append({"epoch": epoch, "step": step, "lr": lr, **agg})
            step += 1
        if progress:
            recent = [c["total"] for c in curve if c["epoch"] == epoch]
            print(f"epoch {epoch:3d} lr {lr:.4g} mean loss {np.mean(recent):.5f}")
        if out_path is not None and (epoch in cfg.lr_drop_epochs or epoch == cfg.epochs):
            out_path.mkdir(parents=True, exist_ok=True)
            ckpt_path = out_path / f"checkpoint_ep{epoch:03d}.mfck"
            save_checkpoint(ckpt_path, model, epoch, _rng_state_json(shuffle_rng))
    if out_path is not None:
        final = out_path / "checkpoint.mfck"
        save_checkpoint(final, model, cfg.epochs, _rng_state_json(shuffle_rng))
        ckpt_path = final
    return TrainResult(model, curve, prepared, ckpt_path)


def _rng_state_json(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, default=int)


# -- checkpointing -------------------------------------------------------------------


def save_checkpoint(path, model: BidirModel, epoch: int, rng_state: str = "{}") -> str:
    """Binary checkpoint: magic, version, sha256 digest, config text, params."""
    payload = bytearray()
    cfg_text = config_to_text(model.cfg, model.stage_cfg, model.lia_cfg).encode("utf-8")
    payload += struct.pack("<I", len(cfg_text)) + cfg_text
    payload += struct.pack("<I", epoch)
    state = rng_state.encode("utf-8")
    payload += struct.pack("<I", len(state)) + state
    arrays = model.params.state_arrays()
    payload += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        payload += struct.pack("<H", len(nb)) + nb
        payload += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            payload += struct.pack("<I", d)
        payload += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    digest = hashlib.sha256(bytes(payload)).digest()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + digest + payload)
    return digest.hex()


def checkpoint_digest(path) -> str:
    with open(path, "rb") as fh:
        head = fh.read(4 + 4 + 32)
    return head[8:40].hex()


def load_checkpoint(path) -> tuple[BidirModel, int, str]:
    """Rebuild the model from the embedded config and restore parameters."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 40 or blob[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported version {version}")
    digest = blob[8:40]
    payload = blob[40:]
    if hashlib.sha256(payload).digest() != digest:
        raise CorruptCheckpoint(f"{path}: digest mismatch")
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(payload):
            raise CorruptCheckpoint(f"{path}: truncated payload")
        chunk = payload[off: off + n]
        off += n
        return chunk

    cfg_len = struct.unpack("<I", take(4))[0]
    cfg_text = take(cfg_len).decode("utf-8")
    epoch = struct.unpack("<I", take(4))[0]
    state_len = struct.unpack("<I", take(4))[0]
    rng_state = take(state_len).decode("utf-8")
    n_params = struct.unpack("<I", take(4))[0]
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        name_len = struct.unpack("<H", take(2))[0]
        name = take(name_len).decode("utf-8")
        ndim = struct.unpack("<B", take(1))[0]
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
        arrays[name] = arr
    train_cfg, stage_over, lia_over = config_from_text(cfg_text)
    stage_cfg, lia_cfg = resolve_model_configs(train_cfg, stage_over, lia_over)
    model = BidirModel(train_cfg, stage_cfg, lia_cfg)
    try:
        model.params.load_state(arrays)
    except ShapeMismatch as exc:
        raise CorruptCheckpoint(f"{path}: config/parameter mismatch: {exc}") from exc
    return model, epoch, rng_state


def checkpoint_roundtrip(model: BidirModel, workdir) -> bool:
    """save -> load -> forward must match the original forward bitwise."""
    rng = np.random.default_rng(123)
    n = max(64, model.stage_cfg.window_size // 2)
    p_f = rng.random((n, 3)) * 2 - 1
    p_b = rng.random((n, 3)) * 2 - 1
    before = model_forward(model, PointCloud(p_f), PointCloud(p_b), seed=9)
    path = Path(workdir) / "roundtrip.mfck"
    save_checkpoint(path, model, 0)
    loaded, _, _ = load_checkpoint(path)
    after = model_forward(loaded, PointCloud(p_f), PointCloud(p_b), seed=9)
    for key in ("h_f", "h_b", "hhat_f", "hhat_b"):
        if not np.array_equal(before[key], after[key]):
            return False
    return True


# -- preprocessing -------------------------------------------------------------------


@dataclass
class PreprocessResult:
    cloud: PointCloud
    center: np.ndarray
    scale: float
    provenance: dict


def preprocess_run(input_path, n_points: int, outlier_k: int = 16,
                   outlier_std: float = 2.0, dbscan_eps: float | None = None,
                   dbscan_min_pts: int = 8, fps_start: int = 0) -> PreprocessResult:
    """Outlier removal, cluster filtering, normalization and FPS to n_points."""
    raw = mfio.read_cloud(input_path)
    counts = {"input": len(raw)}
    cloud = remove_statistical_outliers(raw, outlier_k, outlier_std)
    counts["after_outlier_removal"] = len(cloud)
    if dbscan_eps is None:
        # adaptive radius from the typical nearest-neighbour spacing
        nn = knn_graph(cloud.points, 1)
        spacing = float(np.sqrt(((cloud.points - cloud.points[nn[:, 0]]) ** 2)
                                .sum(axis=1)).mean())
        dbscan_eps = 4.0 * spacing
    cloud = dbscan_filter(cloud, dbscan_eps, dbscan_min_pts)
    counts["after_dbscan"] = len(cloud)
    if len(cloud) < n_points:
        raise EmptyAfterFiltering(
            f"{len(cloud)} points remain after filtering, need {n_points}")
    cloud, center, scale = normalize(cloud)
    idx = farthest_point_sample(cloud, n_points, fps_start)
    counts["output"] = n_points
    provenance = {"input": str(input_path), "counts": counts,
                  "center": [float(c) for c in center], "scale": scale,
                  "outlier_k": outlier_k, "outlier_std": outlier_std,
                  "dbscan_eps": dbscan_eps, "dbscan_min_pts": dbscan_min_pts,
                  "fps_start": fps_start}
    return PreprocessResult(cloud.select(idx), center, scale, provenance)


# -- inference -----------------------------------------------------------------------


def infer_run(checkpoint_path, cloud: PointCloud, direction: str, seed: int = 0,
              emit_coarse: bool = False, center: np.ndarray | None = None,
              scale: float | None = None) -> dict:
    """Predict the opposite side of one (preprocessed) cloud."""
    if direction not in ("face2bone", "bone2face"):
        raise PresetMismatch(f"direction must be face2bone|bone2face, got {direction!r}")
    model, _, _ = load_checkpoint(checkpoint_path)
    if len(cloud) != model.cfg.n_points:
        raise PresetMismatch(
            f"checkpoint preset expects {model.cfg.n_points} points, got {len(cloud)}")
    rng = np.random.default_rng(seed)
    if direction == "face2bone":
        stage1_net, stage2_net = model.s1_f2b, model.s2_bone
    else:
        stage1_net, stage2_net = model.s1_b2f, model.s2_face
    phi_c, fg = stage1_net.forward(cloud.points, rng)
    coarse = constant(cloud.points) + phi_c
    if model.cfg.coarse_only:
        final = coarse
    else:
        phi_f = stage2_net.forward(coarse, fg, rng)
        final = coarse + phi_f
    out = {"predicted": final.data, "coarse": coarse.data if emit_coarse else None}
    if center is not None and scale is not None:
        out["predicted"] = out["predicted"] * scale + np.asarray(center)
        if out["coarse"] is not None:
            out["coarse"] = out["coarse"] * scale + np.asarray(center)
    return out


# -- evaluation ----------------------------------------------------------------------


def evaluate_pairs(model: BidirModel, prepared: list[PreparedPair], seed: int = 0,
                   with_roi: bool = False, coarse_only: bool | None = None
                   ) -> tuple[MetricReport, list[dict]]:
    """Metrics for both directions of every pair, sorted by pair id.

    Returns the report plus per-pair details including coarse-stage errors.
    """
    report = MetricReport()
    details = []
    for sample in sorted(prepared, key=lambda s: s.pair_id):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE7A1,
                                                            _pair_ordinal(sample.pair_id))))
        out = model.forward(sample.p_f, sample.p_b, rng, sample.struct_f,
                            sample.struct_b, coarse_only=coarse_only)
        detail = {"pair_id": sample.pair_id, "identity_cd": sample.identity_cd}
        sums: dict[str, float] = {}
        for shape, pred, coarse_pred, target in (
                ("face", out.h_f.data, out.hhat_f.data, sample.p_f),
                ("bone", out.h_b.data, out.hhat_b.data, sample.p_b)):
            row = MetricRow(sample.pair_id, shape, None,
                            mped=distort.mped(pred, target),
                            cd=distort.chamfer(pred, target),
                            emd=distort.emd(pred, target),
                            jsd=distort.jsd(pred, target),
                            hd=distort.hausdorff(pred, target))
            report.add(row)
            detail[f"cd_{shape}"] = row.cd
            detail[f"cd_coarse_{shape}"] = distort.chamfer(coarse_pred, target)
            for m in ("mped", "cd", "emd", "jsd", "hd"):
                sums[m] = sums.get(m, 0.0) + getattr(row, m)
        report.add(MetricRow(sample.pair_id, "all", None, **sums))
        if with_roi and sample.roi_sets:
            for name in sorted(sample.roi_sets):
                sides = sample.roi_sets[name]
                fi, bi = sides["face"], sides["bone"]
                pred_face = out.h_f.data[bi]        # bone ROI moved to the face side
                pred_bone = out.h_b.data[fi]
                for shape, pred, target in (("face", pred_face, sample.p_f[fi]),
                                            ("bone", pred_bone, sample.p_b[bi])):
                    report.add(MetricRow(sample.pair_id, shape, name,
                                         mped=distort.mped(pred, target),
                                         cd=distort.chamfer(pred, target),
                                         emd=None,
                                         jsd=None,
                                         hd=distort.hausdorff(pred, target)))
                detail[f"roi_cd_{name}"] = (
                    distort.chamfer(pred_face, sample.p_f[fi])
                    + distort.chamfer(pred_bone, sample.p_b[bi]))
        details.append(detail)
    return report, details


def _pair_ordinal(pair_id: str) -> int:
    digits = "".join(ch for ch in pair_id if ch.isdigit())
    return int(digits) if digits else 0


def compare_checkpoints(report_a: MetricReport, report_b: MetricReport) -> dict:
    """Rank-sum p-values between two runs per metric on the combined shape rows."""
    out = {}
    for metric in ("mped", "cd", "emd", "jsd", "hd"):
        a = report_a.values(metric, "all")
        b = report_b.values(metric, "all")
        if len(a) >= 5 and len(b) >= 5:
            out[metric] = distort.ranksum_test(a, b)
    return out
