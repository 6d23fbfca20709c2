"""Readers and writers for the on-disk formats.

* point clouds: ASCII PLY (``vertex`` element with x, y, z and optional
  nx, ny, nz) or plain ``x y z`` text, one point per line
* correspondences: ``i j`` per line, 0-based source/target indices
* meshes: OBJ with ``v`` and ``f`` records only
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import GeometryError
from .geometry import PointCloud, TriMesh


def _fmt(x: float) -> str:
    return repr(float(x))


def write_ply(path, cloud: PointCloud) -> None:
    pts = cloud.points
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if cloud.normals is not None:
        lines += ["property double nx", "property double ny", "property double nz"]
        data = np.hstack([pts, cloud.normals])
    else:
        data = pts
    lines.append("end_header")
    body = [" ".join(_fmt(v) for v in row) for row in data]
    atomic_write_text(path, "\n".join(lines + body) + "\n")


def read_ply(path, frame_id: int = 0) -> PointCloud:
    with open(path, "r") as fh:
        if fh.readline().strip() != "ply":
            raise GeometryError(f"{path}: not a PLY file")
        fmt = None
        elements: list[tuple[str, int, list[str]]] = []
        for line in fh:
            tok = line.split()
            if not tok or tok[0] in ("comment", "obj_info"):
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append((tok[1], int(tok[2]), []))
            elif tok[0] == "property":
                if tok[1] == "list":
                    elements[-1][2].append(tok[4])
                else:
                    elements[-1][2].append(tok[2])
            elif tok[0] == "end_header":
                break
        if fmt != "ascii":
            raise GeometryError(f"{path}: only ASCII PLY is supported (got {fmt})")
        vertex = None
        for name, count, props in elements:
            rows = [fh.readline().split() for _ in range(count)]
            if name == "vertex":
                vertex = (props, np.asarray(rows, dtype=np.float64).reshape(count, len(props)))
    if vertex is None:
        raise GeometryError(f"{path}: no vertex element")
    props, data = vertex
    try:
        pts = data[:, [props.index(k) for k in ("x", "y", "z")]]
    except ValueError as exc:
        raise GeometryError(f"{path}: vertex element lacks x/y/z") from exc
    normals = None
    if all(k in props for k in ("nx", "ny", "nz")):
        normals = data[:, [props.index(k) for k in ("nx", "ny", "nz")]]
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        # renormalise text round-off; zero normals mean "absent"
        if np.all(lengths > 0):
            normals = normals / lengths
        else:
            normals = None
    return PointCloud(pts, normals, frame_id)


def read_xyz(path, frame_id: int = 0) -> PointCloud:
    data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if data.size == 0:
        data = data.reshape(0, 3)
    if data.shape[1] < 3:
        raise GeometryError(f"{path}: expected at least 3 columns")
    normals = data[:, 3:6] if data.shape[1] >= 6 else None
    return PointCloud(data[:, :3], normals, frame_id)


def write_xyz(path, cloud: PointCloud) -> None:
    body = [" ".join(_fmt(v) for v in row) for row in cloud.points]
    atomic_write_text(path, "\n".join(body) + "\n")


def read_cloud(path, frame_id: int = 0) -> PointCloud:
    """Dispatch on extension: ``.ply`` or anything else as ``x y z`` text."""
    if str(path).lower().endswith(".ply"):
        return read_ply(path, frame_id)
    return read_xyz(path, frame_id)


def read_matches(path) -> np.ndarray:
    data = np.loadtxt(path, dtype=np.int64, ndmin=2)
    if data.size == 0:
        return np.zeros((0, 2), np.int64)
    if data.shape[1] != 2:
        raise GeometryError(f"{path}: expected two integer columns")
    return data


def write_matches(path, matches: np.ndarray) -> None:
    body = [f"{int(i)} {int(j)}" for i, j in np.asarray(matches)]
    atomic_write_text(path, "\n".join(body) + ("\n" if body else ""))


def write_obj(path, mesh: TriMesh) -> None:
    lines = ["v " + " ".join(_fmt(c) for c in v) for v in mesh.vertices]
    lines += ["f " + " ".join(str(int(i) + 1) for i in f) for f in mesh.faces]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) - 1 for t in tok[1:]]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return TriMesh(np.asarray(verts).reshape(-1, 3), np.asarray(faces, np.int64).reshape(-1, 3))


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
