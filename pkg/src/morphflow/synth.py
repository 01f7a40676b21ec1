"""Synthetic paired shapes: a bumpy inner surface and an enclosing outer one.

Each pair samples matched directions on the unit sphere. The inner ("bone")
radius carries several smooth Gaussian bumps; the outer ("face") radius adds a
strictly positive thickness field correlated with the inner surface's bump
curvature, so the outer shell encloses the inner one along every matched
direction and the exact correspondence is the identity on indices. Two fixed
spherical caps provide labelled regions, boxed per side in raw coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud, RoiLabel

CAP_DIRECTIONS = {
    "nose": np.array([0.93, 0.0, 0.367]),
    "lip": np.array([0.82, -0.35, -0.45]),
}
CAP_COS = np.cos(np.deg2rad(24.0))

MIN_THICKNESS = 0.06
BASE_THICKNESS = 0.18


@dataclass(frozen=True)
class SyntheticPair:
    """One paired sample with labelled caps and known correspondence."""

    bone: PointCloud
    face: PointCloud
    rois: tuple[RoiLabel, ...]
    correspondence: np.ndarray
    seed: int


def _unit_directions(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _bump_field(dirs: np.ndarray, centers: np.ndarray, widths: np.ndarray,
                amps: np.ndarray, width_scale: float = 1.0) -> np.ndarray:
    """Sum of Gaussians in chordal distance on the sphere."""
    d2 = ((dirs[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    sig2 = (widths * width_scale) ** 2
    return (amps[None, :] * np.exp(-0.5 * d2 / sig2[None, :])).sum(axis=1)


def synth_generate(seed: int, n_points: int, n_pairs: int) -> list[SyntheticPair]:
    """Deterministic list of paired shapes; same seed gives identical pairs."""
    if n_points < 256:
        raise ValueError("n_points must be at least 256")
    root = np.random.SeedSequence(seed)
    pairs = []
    for pair_idx, child in enumerate(root.spawn(n_pairs)):
        rng = np.random.default_rng(child)
        dirs = _unit_directions(rng, n_points)

        n_bumps = int(rng.integers(6, 11))
        centers = _unit_directions(rng, n_bumps)
        widths = rng.uniform(0.3, 0.65, n_bumps)
        amps = rng.uniform(-0.12, 0.3, n_bumps)
        r_bone = 1.0 + _bump_field(dirs, centers, widths, amps)
        r_bone = np.maximum(r_bone, 0.3)

        # thickness follows a smoothed-minus-sharp curvature proxy of the bumps
        smoothed = _bump_field(dirs, centers, widths, amps, width_scale=1.6)
        curvature = smoothed - (r_bone - 1.0)
        extra_centers = _unit_directions(rng, 3)
        extra = _bump_field(dirs, extra_centers, rng.uniform(0.35, 0.6, 3),
                            rng.uniform(-0.05, 0.08, 3))
        thickness = BASE_THICKNESS + 0.6 * curvature + extra
        thickness = np.maximum(thickness, MIN_THICKNESS)

        bone_pts = r_bone[:, None] * dirs
        face_pts = (r_bone + thickness)[:, None] * dirs

        rois = []
        for name, axis in CAP_DIRECTIONS.items():
            axis = axis / np.linalg.norm(axis)
            mask = dirs @ axis >= CAP_COS
            for side, pts in (("bone", bone_pts), ("face", face_pts)):
                sel = pts[mask]
                rois.append(RoiLabel(name, sel.min(axis=0), sel.max(axis=0), side))

        pid = f"pair_{pair_idx:04d}"
        pairs.append(SyntheticPair(
            bone=PointCloud(bone_pts, id=pid + ":bone"),
            face=PointCloud(face_pts, id=pid + ":face"),
            rois=tuple(rois),
            correspondence=np.arange(n_points, dtype=np.int64),
            seed=seed,
        ))
    return pairs
