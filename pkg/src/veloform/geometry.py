"""Point clouds, triangle meshes, domain normalization and evaluation metrics.

Distances follow the usual conventions for shape interpolation benchmarks:

* Chamfer distance (CD) is the symmetric mean of *squared* nearest-neighbour
  distances, halved.
* Hausdorff distance (HD) is the symmetric max of *unsquared* nearest-neighbour
  distances.

Nearest-neighbour queries are brute force for small clouds and go through a
k-d tree above ``BRUTE_FORCE_LIMIT`` points; both paths return identical
distances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import GeometryError

BRUTE_FORCE_LIMIT = 1000
NORMAL_TOL = 1e-6
DOMAIN_MARGIN = 0.1


def _as_points(arr, name: str = "points") -> np.ndarray:
    pts = np.asarray(arr, dtype=np.float64)
    if pts.size == 0:
        pts = pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise GeometryError(f"{name} must have shape (n, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise GeometryError(f"{name} contain non-finite coordinates")
    return pts


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    frame_id: int = 0

    def __post_init__(self):
        pts = _as_points(self.points)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = _as_points(self.normals, "normals")
            if len(nrm) != len(pts):
                raise GeometryError(
                    f"normals length {len(nrm)} != points length {len(pts)}"
                )
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lengths - 1.0) > NORMAL_TOL):
                raise GeometryError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        nrm = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], nrm, self.frame_id)


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        verts = _as_points(self.vertices, "vertices")
        faces = np.asarray(self.faces, dtype=np.int64)
        if faces.size == 0:
            faces = faces.reshape(0, 3)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise GeometryError(f"faces must have shape (f, 3), got {faces.shape}")
        if len(faces) and (faces.min() < 0 or faces.max() >= len(verts)):
            raise GeometryError("face index out of range")
        degenerate = (
            (faces[:, 0] == faces[:, 1])
            | (faces[:, 1] == faces[:, 2])
            | (faces[:, 0] == faces[:, 2])
        )
        if np.any(degenerate):
            raise GeometryError(f"{int(degenerate.sum())} degenerate faces")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        cross = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def sample_points(self, n: int, seed: int = 0) -> np.ndarray:
        """Area-uniform samples on the mesh surface."""
        areas = self.triangle_areas()
        total = areas.sum()
        if total <= 0:
            raise GeometryError("cannot sample a mesh with zero area")
        rng = np.random.default_rng(seed)
        tri = rng.choice(len(areas), size=n, p=areas / total)
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        v = self.vertices[self.faces[tri]]
        return (
            (1 - r1)[:, None] * v[:, 0]
            + (r1 * (1 - r2))[:, None] * v[:, 1]
            + (r1 * r2)[:, None] * v[:, 2]
        )


@dataclass(frozen=True, eq=False)
class CorrespondencePair:
    """Source/target clouds plus a sparse set of ``(source_index, target_index)`` matches.

    An empty match list is only accepted when ``unsupervised`` is set.
    """

    source: PointCloud
    target: PointCloud
    matches: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))
    unsupervised: bool = False

    def __post_init__(self):
        m = np.asarray(self.matches, dtype=np.int64)
        if m.size == 0:
            m = m.reshape(0, 2)
        if m.ndim != 2 or m.shape[1] != 2:
            raise GeometryError(f"matches must have shape (k, 2), got {m.shape}")
        if len(m) == 0 and not self.unsupervised:
            raise GeometryError("pair has no correspondences")
        if len(m):
            if m[:, 0].min() < 0 or m[:, 0].max() >= len(self.source):
                raise GeometryError("source match index out of range")
            if m[:, 1].min() < 0 or m[:, 1].max() >= len(self.target):
                raise GeometryError("target match index out of range")
        object.__setattr__(self, "matches", m)

    @property
    def matched_source(self) -> np.ndarray:
        return self.source.points[self.matches[:, 0]]

    @property
    def matched_target(self) -> np.ndarray:
        return self.target.points[self.matches[:, 1]]


@dataclass(frozen=True)
class AxisAlignedDomain:
    min_corner: tuple = (-1.0, -1.0, -1.0)
    max_corner: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64)
        hi = np.asarray(self.max_corner, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise GeometryError("domain corners must be 3D")
        if not np.all(lo < hi):
            raise GeometryError("domain min_corner must be < max_corner componentwise")
        object.__setattr__(self, "min_corner", tuple(float(x) for x in lo))
        object.__setattr__(self, "max_corner", tuple(float(x) for x in hi))

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.min_corner)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.max_corner)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, pts: np.ndarray, slack: float = 0.0) -> np.ndarray:
        pad = slack * self.extent
        return np.all((pts >= self.lo - pad) & (pts <= self.hi + pad), axis=-1)

    def sample_uniform(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.lo + rng.random((n, 3)) * self.extent


@dataclass(frozen=True)
class AffineTransform:
    """Uniform scale + translation, ``y = scale * x + offset``."""

    scale: float = 1.0
    offset: tuple = (0.0, 0.0, 0.0)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(pts, dtype=np.float64) + np.asarray(self.offset)

    def inverse(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - np.asarray(self.offset)) / self.scale

    def apply_cloud(self, pc: PointCloud) -> PointCloud:
        return PointCloud(self.apply(pc.points), pc.normals, pc.frame_id)

    def inverse_cloud(self, pc: PointCloud) -> PointCloud:
        return PointCloud(self.inverse(pc.points), pc.normals, pc.frame_id)

    def inverse_mesh(self, mesh: TriMesh) -> TriMesh:
        return TriMesh(self.inverse(mesh.vertices), mesh.faces)

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and all(o == 0.0 for o in self.offset)

    def to_dict(self) -> dict:
        return {"scale": float(self.scale), "offset": [float(o) for o in self.offset]}

    @classmethod
    def from_dict(cls, d: dict) -> "AffineTransform":
        return cls(float(d["scale"]), tuple(float(o) for o in d["offset"]))


def normalize_to_domain(
    clouds: Sequence[PointCloud], domain: AxisAlignedDomain = AxisAlignedDomain()
) -> tuple[list[PointCloud], AffineTransform]:
    """Fit the union bounding box of ``clouds`` into ``domain`` with a 10% margin.

    Clouds already inside the margin box are returned unchanged (identity
    transform). Otherwise one uniform scale and translation centres the union
    box in the domain so that its longest side spans 90% of the shortest
    domain side.
    """
    nonempty = [c.points for c in clouds if len(c)]
    if not nonempty:
        raise GeometryError("no points")
    allpts = np.concatenate(nonempty)
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    half = 0.5 * (1.0 - DOMAIN_MARGIN) * domain.extent
    inner_lo, inner_hi = domain.center - half, domain.center + half
    if np.all(lo >= inner_lo) and np.all(hi <= inner_hi):
        tf = AffineTransform()
        return list(clouds), tf
    span = float(np.max(hi - lo))
    scale = (1.0 - DOMAIN_MARGIN) * float(np.min(domain.extent)) / max(span, 1e-300)
    offset = domain.center - scale * 0.5 * (lo + hi)
    tf = AffineTransform(scale, tuple(float(o) for o in offset))
    return [tf.apply_cloud(c) for c in clouds], tf


# --------------------------------------------------------------------------
# nearest neighbours
# --------------------------------------------------------------------------


def _brute_nn_sq(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = np.empty(len(a))
    for s in range(0, len(a), chunk):
        d = a[s : s + chunk, None, :] - b[None, :, :]
        out[s : s + chunk] = np.einsum("ijk,ijk->ij", d, d).min(axis=1)
    return out


def nearest_sq_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distance from every point of ``a`` to its nearest point in ``b``."""
    if max(len(a), len(b)) <= BRUTE_FORCE_LIMIT:
        return _brute_nn_sq(a, b)
    dist, _ = cKDTree(b).query(a, k=1)
    return dist**2


def _points_of(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    return _as_points(x)


def _check_nonempty(*arrays):
    for arr in arrays:
        if len(arr) == 0:
            raise GeometryError("empty point cloud")


def chamfer_distance(a, b) -> float:
    pa, pb = _points_of(a), _points_of(b)
    _check_nonempty(pa, pb)
    return float(
        0.5 * (nearest_sq_distances(pa, pb).mean() + nearest_sq_distances(pb, pa).mean())
    )


def hausdorff_distance(a, b) -> float:
    pa, pb = _points_of(a), _points_of(b)
    _check_nonempty(pa, pb)
    forward = nearest_sq_distances(pa, pb).max()
    backward = nearest_sq_distances(pb, pa).max()
    return float(np.sqrt(max(forward, backward)))


def surface_area(mesh: TriMesh) -> float:
    return float(mesh.triangle_areas().sum())


def surface_area_std(areas: Iterable[float]) -> float:
    """Spread of surface areas over ``N + 1`` frames, normalised by ``N``."""
    a = np.asarray(list(areas), dtype=np.float64)
    if a.size < 2:
        raise GeometryError("surface_area_std needs at least 2 areas")
    n = a.size - 1
    return float(np.sqrt(np.sum((a - a.mean()) ** 2) / n))


def pointwise_rmse(pred, gt) -> float:
    pp, pg = _points_of(pred), _points_of(gt)
    if pp.shape != pg.shape:
        raise GeometryError(f"size mismatch: {pp.shape} vs {pg.shape}")
    _check_nonempty(pp)
    return float(np.sqrt(np.mean(np.sum((pp - pg) ** 2, axis=1))))
