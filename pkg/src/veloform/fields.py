"""Latent-conditioned coordinate fields and their differential operators.

Two fields share one interface, ``field(x, t, z)``:

* an implicit field ``phi(x, t, z)`` returning one scalar per point, whose
  zero level set at time ``t`` is the surface,
* a velocity field ``V(x, t, z)`` returning a 3-vector per point.

Both trainable fields are sine-activated MLPs fed ``[x, t, z]``; analytic
closed-form fields with the same call signature are provided as test doubles
and as ground truth for the synthetic scenes.

All derivatives are taken with autograd. ``create_graph=True`` keeps the
graph so that losses built from the derivatives can be back-propagated to
the network parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, GeometryError

TIME_INTERVAL = (0.0, 1.0)


# --------------------------------------------------------------------------
# networks
# --------------------------------------------------------------------------


class SineLayer(nn.Module):
    def __init__(self, in_features, out_features, omega=30.0, is_first=False):
        super().__init__()
        self.omega = float(omega)
        self.linear = nn.Linear(in_features, out_features)
        with torch.no_grad():
            if is_first:
                bound = 1.0 / in_features
            else:
                bound = math.sqrt(6.0 / in_features) / self.omega
            self.linear.weight.uniform_(-bound, bound)

    def forward(self, x):
        return torch.sin(self.omega * self.linear(x))


class SirenNet(nn.Module):
    """Sine-activated MLP; smooth, so every spatial derivative exists."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        hidden_layers: int = 4,
        hidden_units: int = 256,
        first_omega: float = 30.0,
        hidden_omega: float = 30.0,
    ):
        super().__init__()
        layers = [SineLayer(in_features, hidden_units, first_omega, is_first=True)]
        for _ in range(hidden_layers - 1):
            layers.append(SineLayer(hidden_units, hidden_units, hidden_omega))
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(hidden_units, out_features)
        with torch.no_grad():
            bound = math.sqrt(6.0 / hidden_units) / hidden_omega
            self.head.weight.uniform_(-bound, bound)

    def forward(self, x):
        return self.head(self.body(x))


@dataclass(frozen=True)
class FieldArch:
    """Architecture hyper-parameters of one coordinate network."""

    hidden_layers: int = 4
    hidden_units: int = 256
    first_omega: float = 30.0
    hidden_omega: float = 30.0

    def to_dict(self) -> dict:
        return {
            "hidden_layers": self.hidden_layers,
            "hidden_units": self.hidden_units,
            "first_omega": self.first_omega,
            "hidden_omega": self.hidden_omega,
        }


class CoordinateField(nn.Module):
    """Base class: concatenates ``[x, t, z]`` and feeds a network.

    Subclasses set ``out_dim``. ``code_dim`` is the dimension of the
    conditioning code (the concatenation of source and target latents).
    """

    out_dim = 1
    smooth = True

    def __init__(self, code_dim: int, arch: FieldArch = FieldArch()):
        super().__init__()
        self.code_dim = int(code_dim)
        self.arch = arch
        self.net = SirenNet(
            3 + 1 + self.code_dim,
            self.out_dim,
            arch.hidden_layers,
            arch.hidden_units,
            arch.first_omega,
            arch.hidden_omega,
        )

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def forward(self, x, t, z):
        out = self.net(torch.cat([x, t, z], dim=-1))
        return out[..., 0] if self.out_dim == 1 else out


class ImplicitField(CoordinateField):
    out_dim = 1


class VelocityField(CoordinateField):
    out_dim = 3


class AnalyticField(nn.Module):
    """Closed-form field ``fn(x, t) -> values`` with the trainable-field call signature.

    The code is accepted and shape-checked but ignored. ``smooth=False``
    marks doubles whose second derivatives are unavailable.
    """

    def __init__(
        self,
        fn: Callable,
        out_dim: int,
        code_dim: int = 0,
        smooth: bool = True,
        dtype: torch.dtype = torch.float64,
        name: str = "analytic",
    ):
        super().__init__()
        self.fn = fn
        self.out_dim = out_dim
        self.code_dim = int(code_dim)
        self.smooth = smooth
        self._dtype = dtype
        self.name = name

    @property
    def dtype(self) -> torch.dtype:
        return self._dtype

    def forward(self, x, t, z):
        return self.fn(x, t[..., 0])


def _vec(v, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(v, dtype=np.float64), dtype=like.dtype, device=like.device)


def sphere_sdf(center=(0.0, 0.0, 0.0), radius=0.5, code_dim=0) -> AnalyticField:
    def fn(x, t):
        return torch.linalg.norm(x - _vec(center, x), dim=-1) - radius

    return AnalyticField(fn, 1, code_dim, name="sphere")


def plane_sdf(normal=(0.0, 0.0, 1.0), offset=0.0, code_dim=0) -> AnalyticField:
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)

    def fn(x, t):
        return x @ _vec(n, x) - offset

    return AnalyticField(fn, 1, code_dim, name="plane")


def translating_sphere_sdf(velocity, radius=0.5, center=(0.0, 0.0, 0.0), code_dim=0):
    def fn(x, t):
        c = _vec(center, x) + t[..., None] * _vec(velocity, x)
        return torch.linalg.norm(x - c, dim=-1) - radius

    return AnalyticField(fn, 1, code_dim, name="translating_sphere")


def constant_velocity(v, code_dim=0) -> AnalyticField:
    def fn(x, t):
        return torch.zeros_like(x) + _vec(v, x)

    return AnalyticField(fn, 3, code_dim, name="constant")


def linear_velocity(matrix, bias=(0.0, 0.0, 0.0), code_dim=0) -> AnalyticField:
    """``V(x) = A x + b``."""

    def fn(x, t):
        return x @ _vec(matrix, x).T + _vec(bias, x)

    return AnalyticField(fn, 3, code_dim, name="linear")


def rotation_velocity(omega=(0.0, 0.0, 1.0), code_dim=0) -> AnalyticField:
    """Rigid rotation ``V(x) = omega x x``."""

    def fn(x, t):
        return torch.linalg.cross(_vec(omega, x).expand_as(x), x, dim=-1)

    return AnalyticField(fn, 3, code_dim, name="rotation")


def scaling_velocity(k=0.5, code_dim=0) -> AnalyticField:
    return AnalyticField(lambda x, t: k * x, 3, code_dim, name="scaling")


def quadratic_velocity(code_dim=0) -> AnalyticField:
    """``V(x) = (x_0^2, 0, 0)``; Laplacian ``(2, 0, 0)``."""

    def fn(x, t):
        out = torch.zeros_like(x)
        return torch.cat([x[:, :1] ** 2, out[:, 1:]], dim=-1)

    return AnalyticField(fn, 3, code_dim, name="quadratic")


# --------------------------------------------------------------------------
# queries
# --------------------------------------------------------------------------


@dataclass
class FieldQuery:
    """Points, a time (scalar or one per point) and a conditioning code.

    Times outside ``[0, 1]`` are rejected unless ``extrapolate`` is set.
    """

    points: object
    time: object
    code: object
    extrapolate: bool = False

    def __post_init__(self):
        t = np.asarray(self.time.detach().cpu() if torch.is_tensor(self.time) else self.time)
        if not np.all(np.isfinite(t)):
            raise GeometryError("query time must be finite")
        if not self.extrapolate:
            lo, hi = TIME_INTERVAL
            if np.any(t < lo) or np.any(t > hi):
                raise GeometryError(
                    f"query time outside [{lo}, {hi}]; set extrapolate=True to allow it"
                )

    def tensors(self, field) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Return ``(x, t, z)`` in the field's dtype, with ``t`` of shape ``(n, 1)``."""
        dtype = field.dtype
        x = torch.as_tensor(self.points, dtype=dtype)
        if x.ndim != 2 or x.shape[-1] != 3:
            raise GeometryError(f"query points must have shape (n, 3), got {tuple(x.shape)}")
        n = x.shape[0]
        t = torch.as_tensor(self.time, dtype=dtype)
        t = t.reshape(-1, 1).expand(n, 1) if t.numel() == 1 else t.reshape(n, 1)
        z = torch.as_tensor(self.code, dtype=dtype)
        if z.shape[-1] != field.code_dim:
            raise GeometryError(
                f"code dimension {z.shape[-1]} does not match field code_dim {field.code_dim}"
            )
        z = z.expand(n, -1) if z.ndim == 1 else z
        return x, t, z


def _leaf(x: torch.Tensor) -> torch.Tensor:
    # keep upstream graph (e.g. advected points) but make x differentiable
    return x if x.requires_grad else x.detach().requires_grad_(True)


def _grad(out, inp, create_graph, retain_graph=None):
    """``d out.sum() / d inp``; zeros when ``out`` does not depend on ``inp``."""
    if not out.requires_grad:
        return torch.zeros_like(inp)
    g = torch.autograd.grad(
        out.sum(), inp, retain_graph=retain_graph, create_graph=create_graph, allow_unused=True
    )[0]
    return g if g is not None else torch.zeros_like(inp)


def phi_terms(field, x, t, z, create_graph: bool = False, need_dt: bool = True):
    """``phi``, its spatial gradient and (optionally) its time derivative."""
    x = _leaf(x)
    t = _leaf(t) if need_dt else t
    with torch.enable_grad():
        phi = field(x, t, z)
        inputs = [x, t] if need_dt else [x]
        if phi.requires_grad:
            grads = torch.autograd.grad(
                phi.sum(), inputs, create_graph=create_graph, allow_unused=True
            )
        else:
            grads = (None, None)
    grad = grads[0] if grads[0] is not None else torch.zeros_like(x)
    out = {"x": x, "phi": phi, "grad": grad}
    if need_dt:
        out["dt"] = grads[1][:, 0] if grads[1] is not None else torch.zeros_like(phi)
    return out


def velocity_terms(
    field,
    x,
    t,
    z,
    create_graph: bool = False,
    need_jacobian: bool = True,
    laplacian: str | None = None,
    fd_step: float = 1e-3,
):
    """Velocity and derivative bundle.

    ``laplacian`` is ``None``, ``"exact"`` (nested autograd) or
    ``"finite_difference"`` (7-point stencil with step ``fd_step``).
    """
    if laplacian == "exact" and not getattr(field, "smooth", True):
        raise ConfigError(
            "exact Laplacian needs second derivatives; use mode='finite_difference'"
        )
    x = _leaf(x)
    need_graph = create_graph or laplacian == "exact"
    with torch.enable_grad():
        v = field(x, t, z)
        out = {"x": x, "v": v}
        if need_jacobian or laplacian == "exact":
            rows = []
            for i in range(3):
                rows.append(_grad(v[:, i], x, need_graph, retain_graph=True))
            jac = torch.stack(rows, dim=1)
            out["jac"] = jac
            out["div"] = jac.diagonal(dim1=1, dim2=2).sum(-1)
        if laplacian == "exact":
            lap = torch.zeros_like(v)
            comps = []
            for i in range(3):
                acc = torch.zeros_like(v[:, 0])
                for j in range(3):
                    if not jac[:, i, j].requires_grad:
                        continue
                    g = torch.autograd.grad(
                        jac[:, i, j].sum(),
                        x,
                        retain_graph=True,
                        create_graph=create_graph,
                        allow_unused=True,
                    )[0]
                    if g is not None:
                        acc = acc + g[:, j]
                comps.append(acc)
            lap = torch.stack(comps, dim=-1)
            out["lap"] = lap
    if laplacian == "finite_difference":
        out["lap"] = fd_laplacian(field, x.detach(), t, z, fd_step, base=v)
    elif laplacian not in (None, "exact"):
        raise ConfigError(f"unknown laplacian mode {laplacian!r}")
    return out


def fd_laplacian(field, x, t, z, step, base=None):
    if base is None:
        base = field(x, t, z)
    acc = -6.0 * base
    for j in range(3):
        e = torch.zeros_like(x)
        e[:, j] = step
        acc = acc + field(x + e, t, z) + field(x - e, t, z)
    return acc / step**2


# --------------------------------------------------------------------------
# public single-purpose operators
# --------------------------------------------------------------------------


def eval_phi(field, q: FieldQuery, create_graph: bool = False) -> torch.Tensor:
    x, t, z = q.tensors(field)
    with torch.set_grad_enabled(create_graph):
        return field(x, t, z)


def grad_phi(field, q: FieldQuery, create_graph: bool = False) -> torch.Tensor:
    x, t, z = q.tensors(field)
    return phi_terms(field, x, t, z, create_graph, need_dt=False)["grad"]


def dphi_dt(field, q: FieldQuery, create_graph: bool = False) -> torch.Tensor:
    x, t, z = q.tensors(field)
    return phi_terms(field, x, t, z, create_graph)["dt"]


def eval_velocity(field, q: FieldQuery, create_graph: bool = False) -> torch.Tensor:
    x, t, z = q.tensors(field)
    with torch.set_grad_enabled(create_graph):
        return field(x, t, z)


def velocity_jacobian(field, q: FieldQuery, create_graph: bool = False) -> torch.Tensor:
    """Row ``i`` is the spatial gradient of velocity component ``i``."""
    x, t, z = q.tensors(field)
    return velocity_terms(field, x, t, z, create_graph)["jac"]


def velocity_divergence(field, q: FieldQuery, create_graph: bool = False) -> torch.Tensor:
    x, t, z = q.tensors(field)
    return velocity_terms(field, x, t, z, create_graph)["div"]


def velocity_laplacian(
    field, q: FieldQuery, mode: str = "exact", step: float = 1e-3, create_graph: bool = False
) -> torch.Tensor:
    x, t, z = q.tensors(field)
    return velocity_terms(
        field, x, t, z, create_graph, need_jacobian=False, laplacian=mode, fd_step=step
    )["lap"]


# --------------------------------------------------------------------------
# latent codes
# --------------------------------------------------------------------------


class LatentTable(nn.Module):
    """One trainable code of dimension ``m`` per frame id."""

    def __init__(self, codes: dict[int, torch.Tensor] | None = None, m: int = 128):
        super().__init__()
        self.m = int(m)
        self.codes = nn.ParameterDict()
        for fid, code in (codes or {}).items():
            self.set(fid, code)

    def set(self, frame_id: int, code) -> None:
        code = torch.as_tensor(code, dtype=torch.float32).detach().clone()
        if code.shape != (self.m,):
            raise GeometryError(f"latent code must have shape ({self.m},), got {tuple(code.shape)}")
        if not torch.all(torch.isfinite(code)):
            raise GeometryError("latent code must be finite")
        self.codes[str(int(frame_id))] = nn.Parameter(code)

    def __getitem__(self, frame_id: int) -> nn.Parameter:
        return self.codes[str(int(frame_id))]

    def __contains__(self, frame_id) -> bool:
        return str(int(frame_id)) in self.codes

    def frame_ids(self) -> list[int]:
        return sorted(int(k) for k in self.codes.keys())

    def pair_code(self, source_id: int, target_id: int) -> torch.Tensor:
        """Concatenated conditioning code ``z_source (+) z_target``."""
        return torch.cat([self[source_id], self[target_id]])

    def parameters_for(self, frame_ids: Iterable[int]) -> list[nn.Parameter]:
        return [self[f] for f in frame_ids]
