"""File formats: ASCII XYZ, PLY (ascii / binary little-endian), ROI JSON sidecars.

The PLY writer emits double-precision vertex properties by default so that a
write/read round trip preserves float64 coordinates bitwise; the reader
accepts float or double properties and skips any extra per-vertex fields.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .cloud import PointCloud, RoiLabel
from .errors import EmptyCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_xyz(path) -> PointCloud:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if len(parts) >= 3:
                rows.append([float(parts[0]), float(parts[1]), float(parts[2])])
    if not rows:
        raise EmptyCloud(f"no points in {path}")
    return PointCloud(np.asarray(rows), id=Path(path).stem)


def write_xyz(path, points) -> None:
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points)
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in pts:
            fh.write(f"{x!r} {y!r} {z!r}\n")


def read_ply(path) -> PointCloud:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise EmptyCloud(f"{path} is not a PLY file")
        fmt = None
        n_vertex = 0
        props: list[tuple[str, str]] = []
        in_vertex = False
        while True:
            line = fh.readline()
            if not line:
                raise EmptyCloud(f"{path}: truncated header")
            tokens = line.decode("ascii").strip().split()
            if not tokens:
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                in_vertex = tokens[1] == "vertex"
                if in_vertex:
                    n_vertex = int(tokens[2])
            elif tokens[0] == "property" and in_vertex:
                props.append((tokens[1], tokens[2]))
            elif tokens[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise EmptyCloud(f"{path}: unsupported PLY format {fmt}")
        names = [name for _, name in props]
        for axis in ("x", "y", "z"):
            if axis not in names:
                raise EmptyCloud(f"{path}: vertex element lacks property {axis}")
        if fmt == "ascii":
            data = np.loadtxt(fh, max_rows=n_vertex, ndmin=2)
            cols = [names.index(a) for a in "xyz"]
            pts = data[:, cols].astype(np.float64)
        else:
            dtype = np.dtype([(name, "<" + _PLY_TYPES[t]) for t, name in props])
            raw = np.frombuffer(fh.read(dtype.itemsize * n_vertex), dtype=dtype, count=n_vertex)
            pts = np.stack([raw[a].astype(np.float64) for a in "xyz"], axis=1)
    return PointCloud(pts, id=Path(path).stem)


def write_ply(path, points, binary: bool = True, double: bool = True) -> None:
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    prop = "double" if double else "float"
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {len(pts)}",
        f"property {prop} x",
        f"property {prop} y",
        f"property {prop} z",
        "end_header",
    ]
    if binary:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(np.ascontiguousarray(pts, dtype="<f8" if double else "<f4").tobytes())
    else:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(header) + "\n")
            for x, y, z in pts:
                fh.write(f"{x!r} {y!r} {z!r}\n")


def read_cloud(path) -> PointCloud:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return read_ply(path)
    return read_xyz(path)


def write_cloud(path, points) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        write_ply(path, points)
    else:
        write_xyz(path, points)


def read_roi_labels(path) -> list[RoiLabel]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if isinstance(payload, dict):
        payload = [payload]
    return [RoiLabel(item["name"], np.asarray(item["box_min"], dtype=np.float64),
                     np.asarray(item["box_max"], dtype=np.float64), item["cloud_side"])
            for item in payload]


def write_roi_labels(path, labels: list[RoiLabel]) -> None:
    payload = [{"name": r.name, "box_min": list(r.box_min), "box_max": list(r.box_max),
                "cloud_side": r.cloud_side} for r in labels]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
