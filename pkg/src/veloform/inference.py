"""Surfaces and point trajectories from a trained state.

Public functions take and return coordinates in the *input* frame; the
state's normalising transform is applied on the way in and inverted on the
way out.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .errors import GeometryError
from .geometry import AxisAlignedDomain, PointCloud, TriMesh
from .integrate import IntegratorConfig, integrate
from .surface import extract_field_surface

log = logging.getLogger(__name__)

__all__ = [
    "IntegratorConfig",
    "TimeGrid",
    "advect_points",
    "extract_surface",
    "interpolate_sequence",
    "upsample_external_points",
    "extrapolate",
]

FAR_OUTSIDE = 0.2


@dataclass(frozen=True)
class TimeGrid:
    values: tuple
    extrapolate: bool = False

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if vals.size == 0:
            raise GeometryError("time grid is empty")
        if not np.all(np.isfinite(vals)):
            raise GeometryError("time grid values must be finite")
        if np.any(np.diff(vals) <= 0):
            raise GeometryError("time grid must be strictly increasing")
        if not self.extrapolate and (vals.min() < 0.0 or vals.max() > 1.0):
            raise GeometryError(
                "time grid leaves [0, 1]; pass extrapolate=True (CLI: --extrapolate)"
            )
        object.__setattr__(self, "values", tuple(float(v) for v in vals))

    @classmethod
    def uniform(cls, n: int, start: float = 0.0, stop: float = 1.0, extrapolate=False) -> "TimeGrid":
        return cls(tuple(np.linspace(start, stop, n)), extrapolate)

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)


def advect_points(
    points,
    code,
    velocity_field,
    t_from: float,
    t_to: float,
    integrator: IntegratorConfig = IntegratorConfig(),
) -> PointCloud:
    """Integrate ``dx/dt = V(x, t, code)`` from ``t_from`` to ``t_to``."""
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise GeometryError("input points must be finite")
    dtype = velocity_field.dtype
    x = torch.as_tensor(pts, dtype=dtype)
    z = torch.as_tensor(code, dtype=dtype).reshape(-1)
    if t_from == t_to:
        return PointCloud(pts.copy())
    with torch.no_grad():
        out = integrate(velocity_field, x, z, float(t_from), float(t_to), integrator)
    return PointCloud(out.double().numpy())


def extract_surface(
    phi_field,
    code,
    t: float,
    resolution: int,
    domain: AxisAlignedDomain = AxisAlignedDomain(),
) -> TriMesh:
    """Marching-cubes mesh of the zero level set of ``phi(., t, code)``."""
    return extract_field_surface(phi_field, code, t, resolution, domain)


def _code(state, pair_id: int) -> torch.Tensor:
    return state.pair_code(pair_id).detach()


def interpolate_sequence(state, pair_id: int, grid: TimeGrid, resolution: int) -> list[TriMesh]:
    """One mesh per grid value, in grid order, in input coordinates."""
    code = _code(state, pair_id)
    meshes = []
    for t in grid:
        mesh = extract_surface(state.phi, code, t, resolution, state.domain)
        meshes.append(state.transform.inverse_mesh(mesh))
    return meshes


def _advect_normalized(state, pair_id, pts, t_from, grid: TimeGrid) -> list[np.ndarray]:
    code = _code(state, pair_id)
    frames = []
    current, t_cur = pts, t_from
    for t in grid:
        current = advect_points(current, code, state.velocity, t_cur, t, state.integrator).points
        t_cur = t
        frames.append(current)
    return frames


def upsample_external_points(
    state, pair_id: int, external: PointCloud, grid: TimeGrid, t_start: float = 0.0
) -> list[PointCloud]:
    """Advect an untrained cloud (observed at ``t_start``) through every grid value.

    Points further than 20% of the domain extent outside the domain trigger
    a warning but are still advected.
    """
    pts = state.transform.apply(external.points)
    outside = ~state.domain.contains(pts, slack=FAR_OUTSIDE)
    if np.any(outside):
        msg = f"{int(outside.sum())} external points lie more than 20% outside the domain"
        log.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    frames = _advect_normalized(state, pair_id, pts, t_start, grid)
    return [PointCloud(state.transform.inverse(f), frame_id=k) for k, f in enumerate(frames)]


def extrapolate(state, pair_id: int, t_beyond: float, points, t_start: float = 0.0) -> PointCloud:
    """Continue advection to any ``t_beyond``, including outside ``[0, 1]``.

    No fidelity guarantee past the training interval; only finiteness and
    continuity with the interpolated trajectory.
    """
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    grid = TimeGrid((float(t_beyond),), extrapolate=True)
    frame = _advect_normalized(state, pair_id, state.transform.apply(pts), t_start, grid)[0]
    return PointCloud(state.transform.inverse(frame))
