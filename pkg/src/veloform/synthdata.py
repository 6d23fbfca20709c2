"""Analytic moving-surface scenes with closed-form level sets and velocities.

Each scene defines ``phi*(x, t)`` as the initial level-set function pulled
back through the exact flow of ``V*``, so the transport equation
``d_t phi* + V* . grad phi* = 0`` holds identically. Scenes double as ground
truth for intermediate frames and as oracles for the losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .errors import GeometryError
from .fields import AnalyticField
from .geometry import AxisAlignedDomain, CorrespondencePair, PointCloud, TriMesh
from .surface import extract_field_surface

SAMPLER_RESOLUTION = 96
NEWTON_TOL = 1e-12


def _t(v, like):
    return torch.as_tensor(np.asarray(v, dtype=np.float64), dtype=like.dtype)


def rotation_matrix(axis_angle) -> np.ndarray:
    """Rodrigues' formula for the rotation by ``|w|`` radians about ``w``."""
    w = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta == 0:
        return np.eye(3)
    k = w / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def _rotation_matrix_torch(w: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Batch of rotation matrices ``exp(t [w]_x)``, one per entry of ``t``."""
    theta = torch.linalg.norm(w)
    k = w / theta
    K = torch.zeros(3, 3, dtype=w.dtype)
    K[0, 1], K[0, 2], K[1, 0] = -k[2], k[1], k[2]
    K[1, 2], K[2, 0], K[2, 1] = -k[0], -k[1], k[0]
    ang = (t * theta)[:, None, None]
    eye = torch.eye(3, dtype=w.dtype)
    return eye + torch.sin(ang) * K + (1 - torch.cos(ang)) * (K @ K)


@dataclass
class AnalyticScene:
    name: str
    params: dict
    sdf: Callable  # torch (x[n,3], t[n]) -> [n]
    velocity: Callable  # torch (x[n,3], t[n]) -> [n,3]
    flow: Callable  # numpy (x[n,3], t0, t1) -> [n,3]
    domain: AxisAlignedDomain = field(default_factory=AxisAlignedDomain)
    rigid: bool = False

    @property
    def descriptor(self) -> dict:
        return {"scene": self.name, **self.params}

    def phi_field(self, code_dim: int = 0) -> AnalyticField:
        return AnalyticField(self.sdf, 1, code_dim, name=f"{self.name}_phi")

    def velocity_field(self, code_dim: int = 0) -> AnalyticField:
        return AnalyticField(self.velocity, 3, code_dim, name=f"{self.name}_velocity")

    def phi(self, x, t) -> np.ndarray:
        x = torch.as_tensor(np.asarray(x, dtype=np.float64))
        tt = torch.full((len(x),), float(t), dtype=torch.float64)
        with torch.no_grad():
            return self.sdf(x, tt).numpy()

    def phi_and_grad(self, x, t):
        x = torch.as_tensor(np.asarray(x, dtype=np.float64)).requires_grad_(True)
        tt = torch.full((len(x),), float(t), dtype=torch.float64)
        val = self.sdf(x, tt)
        (g,) = torch.autograd.grad(val.sum(), x)
        return val.detach().numpy(), g.numpy()

    def project(self, x, t, max_iter: int = 50) -> np.ndarray:
        """Newton iterations ``x <- x - phi grad / |grad|^2`` onto ``phi*(., t) = 0``."""
        x = np.array(x, dtype=np.float64)
        for _ in range(max_iter):
            val, g = self.phi_and_grad(x, t)
            if np.max(np.abs(val)) < NEWTON_TOL:
                break
            x = x - (val / np.maximum(np.sum(g * g, axis=1), 1e-300))[:, None] * g
        return x

    def normals(self, x, t) -> np.ndarray:
        _, g = self.phi_and_grad(x, t)
        return g / np.linalg.norm(g, axis=1, keepdims=True)

    def sample_surface(self, n: int, t: float, rng: np.random.Generator):
        """Area-uniform surface samples at time ``t`` and their unit normals."""
        mesh = self.intermediate(t, SAMPLER_RESOLUTION)
        seed = int(rng.integers(0, 2**31 - 1))
        pts = self.project(mesh.sample_points(n, seed), t)
        return pts, self.normals(pts, t)

    def intermediate(self, t: float, resolution: int) -> TriMesh:
        return extract_field_surface(self.phi_field(), np.zeros(0), t, resolution, self.domain)

    def level_set_residual(self, x, t) -> np.ndarray:
        """``d_t phi* + V* . grad phi*`` at points ``x`` and per-point times ``t``."""
        x = torch.as_tensor(np.asarray(x, dtype=np.float64)).requires_grad_(True)
        tt = torch.as_tensor(np.asarray(t, dtype=np.float64)).requires_grad_(True)
        val = self.sdf(x, tt)
        gx, gt = torch.autograd.grad(val.sum(), [x, tt])
        with torch.no_grad():
            return (gt + (self.velocity(x, tt) * gx).sum(-1)).numpy()


def gen_translation_scene(v=(0.3, 0.0, 0.0), r: float = 0.5) -> AnalyticScene:
    """Sphere of radius ``r`` centred at ``t * v``."""
    v = np.asarray(v, dtype=np.float64)

    def sdf(x, t):
        return torch.linalg.norm(x - t[:, None] * _t(v, x), dim=-1) - r

    def velocity(x, t):
        return torch.zeros_like(x) + _t(v, x)

    def flow(x, t0, t1):
        return np.asarray(x, dtype=np.float64) + (t1 - t0) * v

    return AnalyticScene(
        "translation", {"v": v.tolist(), "r": float(r)}, sdf, velocity, flow, rigid=True
    )


def gen_rotation_scene(
    omega=(0.0, 0.0, 1.0),
    radius: float = 0.45,
    bump_height: float = 0.35,
    bump_width: float = 0.4,
    bump_direction=(1.0, 0.0, 0.0),
) -> AnalyticScene:
    """Star-shaped sphere with one Gaussian bump, spinning with ``V = omega x x``.

    The level-set function is ``|y| - rho(y/|y|)`` with ``y`` the point pulled
    back to t=0; it vanishes on the surface but is not a distance function
    away from it.
    """
    w = np.asarray(omega, dtype=np.float64)
    d = np.asarray(bump_direction, dtype=np.float64)
    d = d / np.linalg.norm(d)

    def shape(y):
        ny = torch.clamp(torch.linalg.norm(y, dim=-1), min=1e-12)
        u = y / ny[:, None]
        dist2 = ((u - _t(d, y)) ** 2).sum(-1)
        rho = radius * (1.0 + bump_height * torch.exp(-dist2 / (2 * bump_width**2)))
        return ny - rho

    def sdf(x, t):
        if not np.any(w):
            return shape(x)
        R = _rotation_matrix_torch(_t(w, x), t)
        # pull back: y = R(t)^T x
        y = torch.einsum("nji,nj->ni", R, x)
        return shape(y)

    def velocity(x, t):
        return torch.linalg.cross(_t(w, x).expand_as(x), x, dim=-1)

    def flow(x, t0, t1):
        return np.asarray(x, dtype=np.float64) @ rotation_matrix(w * (t1 - t0)).T

    params = {
        "omega": w.tolist(),
        "radius": radius,
        "bump_height": bump_height,
        "bump_width": bump_width,
        "bump_direction": d.tolist(),
    }
    return AnalyticScene("rotation", params, sdf, velocity, flow, rigid=True)


def gen_scaling_scene(k: float = 0.5, r: float = 0.4) -> AnalyticScene:
    """Sphere of radius ``r e^{kt}`` under ``V = k x``.

    The level-set function is pulled back through the flow,
    ``e^{-kt} |x| - r``, so transport holds away from the surface too; it is
    a distance function only at t=0.
    """

    def sdf(x, t):
        return torch.exp(-k * t) * torch.linalg.norm(x, dim=-1) - r

    def velocity(x, t):
        return k * x

    def flow(x, t0, t1):
        return np.asarray(x, dtype=np.float64) * np.exp(k * (t1 - t0))

    return AnalyticScene("scaling", {"k": float(k), "r": float(r)}, sdf, velocity, flow)


def gen_bending_scene(amplitude: float = 0.5, half_length: float = 0.5, r: float = 0.2) -> AnalyticScene:
    """Capsule along x bent by ``V = (0, 0, a x^2)``.

    ``V`` is the curl of ``(0, a x^3 / 3, 0)`` and therefore divergence free.
    The flow lifts each cross-section rigidly, ``z -> z + a x^2 t``.
    """
    a = float(amplitude)

    def capsule(p):
        px = torch.clamp(p[:, 0], -half_length, half_length)
        q = p - torch.stack([px, torch.zeros_like(px), torch.zeros_like(px)], dim=-1)
        return torch.linalg.norm(q, dim=-1) - r

    def sdf(x, t):
        y = torch.stack([x[:, 0], x[:, 1], x[:, 2] - a * x[:, 0] ** 2 * t], dim=-1)
        return capsule(y)

    def velocity(x, t):
        zero = torch.zeros_like(x[:, 0])
        return torch.stack([zero, zero, a * x[:, 0] ** 2], dim=-1)

    def flow(x, t0, t1):
        out = np.array(x, dtype=np.float64)
        out[:, 2] += a * out[:, 0] ** 2 * (t1 - t0)
        return out

    params = {"amplitude": a, "half_length": half_length, "r": r}
    return AnalyticScene("bending", params, sdf, velocity, flow)


SCENES = {
    "translation": gen_translation_scene,
    "rotation": gen_rotation_scene,
    "scaling": gen_scaling_scene,
    "bending": gen_bending_scene,
}


def _tangent_basis(n: np.ndarray):
    helper = np.where(np.abs(n[:, :1]) < 0.9, [[1.0, 0, 0]], [[0, 1.0, 0]])
    e1 = np.cross(n, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(n, e1)
    return e1, e2


def make_pair(
    scene: AnalyticScene,
    n_points: int,
    n_matches: int,
    noise_sigma: float = 0.0,
    drop_fraction: float = 0.0,
    seed: int = 0,
    frame_ids=(0, 1),
) -> CorrespondencePair:
    """Sample ``P_0`` at t=0 and ``P_1`` at t=1 with sparse, optionally noisy matches.

    ``n_matches`` source points are transported exactly to t=1, displaced by
    Gaussian noise in the tangent plane of the target surface, projected
    back onto it, and mixed (shuffled) with fresh samples of the target
    surface. ``drop_fraction`` of the resulting matches is then discarded.
    """
    if n_matches > n_points:
        raise GeometryError(f"n_matches ({n_matches}) > n_points ({n_points})")
    if not 0.0 <= drop_fraction <= 1.0:
        raise GeometryError("drop_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    p0, n0 = scene.sample_surface(n_points, 0.0, rng)
    src = np.sort(rng.choice(n_points, size=n_matches, replace=False))
    images = scene.flow(p0[src], 0.0, 1.0)
    if noise_sigma > 0 and n_matches:
        e1, e2 = _tangent_basis(scene.normals(images, 1.0))
        g = rng.normal(0.0, noise_sigma, size=(n_matches, 2))
        images = scene.project(images + g[:, :1] * e1 + g[:, 1:] * e2, 1.0)
    n_fresh = n_points - n_matches
    fresh = scene.sample_surface(n_fresh, 1.0, rng)[0] if n_fresh else np.zeros((0, 3))
    stacked = np.concatenate([images, fresh])
    perm = rng.permutation(n_points)
    p1 = stacked[perm]
    n1 = scene.normals(p1, 1.0)
    inv = np.empty(n_points, dtype=np.int64)
    inv[perm] = np.arange(n_points)
    matches = np.stack([src, inv[:n_matches]], axis=1)
    n_keep = n_matches - int(round(drop_fraction * n_matches))
    keep = np.sort(rng.choice(n_matches, size=n_keep, replace=False))
    matches = matches[keep]
    return CorrespondencePair(
        PointCloud(p0, n0, frame_ids[0]),
        PointCloud(p1, n1, frame_ids[1]),
        matches,
        unsupervised=len(matches) == 0,
    )


def analytic_intermediate(scene: AnalyticScene, t: float, resolution: int) -> TriMesh:
    return scene.intermediate(t, resolution)
