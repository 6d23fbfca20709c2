"""Zero level-set extraction on a uniform grid."""

from __future__ import annotations

import numpy as np
import torch
from skimage import measure

from .errors import EmptyLevelSetError, GeometryError
from .geometry import AxisAlignedDomain, TriMesh

MIN_RESOLUTION = 16


def grid_axes(domain: AxisAlignedDomain, resolution: int) -> list[np.ndarray]:
    return [np.linspace(lo, hi, resolution) for lo, hi in zip(domain.lo, domain.hi)]


def sample_grid(fn, domain: AxisAlignedDomain, resolution: int, chunk: int = 65536) -> np.ndarray:
    """Evaluate ``fn(points) -> values`` on a ``resolution^3`` grid (ij indexing)."""
    axes = grid_axes(domain, resolution)
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        out[s : s + chunk] = fn(pts[s : s + chunk])
    return out.reshape(resolution, resolution, resolution)


def clean_mesh(verts: np.ndarray, faces: np.ndarray) -> TriMesh:
    """Drop faces with repeated indices and vertices no face references."""
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[keep]
    used = np.unique(faces)
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(verts[used], remap[faces])


def marching_cubes(values: np.ndarray, domain: AxisAlignedDomain) -> TriMesh:
    """Triangulate the zero level set of grid ``values`` spanning ``domain``.

    Vertices are placed on grid edges by linear interpolation of the values.
    """
    if not (np.nanmin(values) < 0.0 < np.nanmax(values)):
        raise EmptyLevelSetError("empty level set")
    res = np.asarray(values.shape)
    spacing = tuple((domain.hi - domain.lo) / (res - 1))
    verts, faces, _, _ = measure.marching_cubes(
        values, level=0.0, spacing=spacing, allow_degenerate=False
    )
    verts = verts + domain.lo
    mesh = clean_mesh(verts.astype(np.float64), faces.astype(np.int64))
    if len(mesh.faces) == 0:
        raise EmptyLevelSetError("empty level set")
    return mesh


def extract_field_surface(
    field,
    code,
    t: float,
    resolution: int,
    domain: AxisAlignedDomain = AxisAlignedDomain(),
    chunk: int = 65536,
) -> TriMesh:
    """Marching-cubes mesh of ``field(., t, code) = 0`` over ``domain``."""
    if resolution < MIN_RESOLUTION:
        raise GeometryError(f"resolution must be >= {MIN_RESOLUTION}")
    dtype = field.dtype
    z = torch.as_tensor(code, dtype=dtype).reshape(-1)

    def fn(pts):
        x = torch.as_tensor(pts, dtype=dtype)
        tt = torch.full((len(x), 1), float(t), dtype=dtype)
        with torch.no_grad():
            return field(x, tt, z.expand(len(x), -1)).double().numpy()

    values = sample_grid(fn, domain, resolution, chunk)
    return marching_cubes(values, domain)
