"""Training objective: level-set coupling, correspondence matching and the
continuum-mechanics regularisers on the velocity field.

Every integral over the domain is estimated as a Monte-Carlo *mean* of the
squared integrand norm (``|.|`` for the volume term, Frobenius norm for the
stretching term), so the weights do not depend on batch size.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np
import torch

from .errors import ConfigError, NumericalError
from .fields import phi_terms, velocity_terms
from .integrate import IntegratorConfig, integrate

GRAD_EPS = 1e-8
TERM_NAMES = ("L_i", "L_m", "L_s", "L_v", "L_st", "L_d", "L_n", "L_recon")
WEIGHT_FOR_TERM = {
    "L_i": "lambda_i",
    "L_m": "lambda_m",
    "L_s": "lambda_s",
    "L_v": "lambda_v",
    "L_st": "lambda_st",
    "L_d": "lambda_d",
    "L_n": "lambda_n",
    "L_recon": "lambda_recon",
}


@dataclass(frozen=True)
class LossWeights:
    lambda_i: float = 1.0
    lambda_s: float = 0.1
    lambda_v: float = 0.1
    lambda_st: float = 0.1
    lambda_d: float = 0.1
    lambda_m: float = 10.0
    lambda_n: float = 0.0
    lambda_recon: float = 100.0
    lambda_l: float = 1.0
    alpha: float = 1e-3
    gamma: float = 1e-2

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{f.name} must be finite and nonnegative, got {v}")
        if self.lambda_recon <= 0:
            raise ConfigError("lambda_recon must be > 0: the endpoint surfaces must be pinned")

    def to_dict(self) -> dict:
        return asdict(self)

    def weight(self, term: str) -> float:
        return getattr(self, WEIGHT_FOR_TERM[term])


ABLATIONS = {
    "full": {},
    "w/o L_d": {"lambda_d": 0.0},
    "w/o L_st": {"lambda_st": 0.0},
    "w/o both": {"lambda_d": 0.0, "lambda_st": 0.0},
}


def ablation(weights: LossWeights, name: str) -> LossWeights:
    """Weights for one row of the loss ablation (``full``, ``w/o L_d``, ``w/o L_st``, ``w/o both``)."""
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}")
    return replace(weights, **ABLATIONS[name])


@dataclass
class SampleBatch:
    volume_points: np.ndarray
    surface_points_0: np.ndarray
    surface_points_1: np.ndarray
    matched_pairs: np.ndarray  # (k, 2, 3): source and target positions
    times: np.ndarray
    code: torch.Tensor
    surface_normals_0: np.ndarray | None = None
    offsurface_points: np.ndarray | None = None  # defaults to volume_points


# --------------------------------------------------------------------------
# pointwise pieces
# --------------------------------------------------------------------------


def gradient_mask(grad: torch.Tensor, eps: float = GRAD_EPS) -> torch.Tensor:
    return torch.linalg.norm(grad, dim=-1) > eps


def _unit(grad: torch.Tensor, eps: float = GRAD_EPS) -> torch.Tensor:
    norm = torch.linalg.norm(grad, dim=-1, keepdim=True)
    return grad / torch.clamp(norm, min=eps)


def eikonal_correction(grad_phi: torch.Tensor, jac_v: torch.Tensor, eps: float = GRAD_EPS):
    """``-n^T (grad V) n`` with ``n = grad_phi / |grad_phi|``.

    Returns ``(values, valid)``; points whose gradient norm is ``<= eps`` are
    flagged invalid (their value is 0) and must be excluded by the caller.
    """
    valid = gradient_mask(grad_phi, eps)
    n = _unit(grad_phi, eps)
    r = -torch.einsum("ni,nij,nj->n", n, jac_v, n)
    return torch.where(valid, r, torch.zeros_like(r)), valid


def level_set_residual(phi, dphi_dt, grad_phi, velocity, jac_v, lambda_l, eps=GRAD_EPS):
    r, valid = eikonal_correction(grad_phi, jac_v, eps)
    res = dphi_dt + (velocity * grad_phi).sum(-1) + lambda_l * phi * r
    return res, valid


def level_set_loss(phi, dphi_dt, grad_phi, velocity, jac_v, lambda_l=1.0, eps=GRAD_EPS, diagnostics=None):
    """Mean squared modified level-set residual over non-degenerate points."""
    res, valid = level_set_residual(phi, dphi_dt, grad_phi, velocity, jac_v, lambda_l, eps)
    if diagnostics is not None:
        diagnostics["degenerate_gradients"] = diagnostics.get("degenerate_gradients", 0) + int(
            (~valid).sum()
        )
    if not torch.any(valid):
        return res.sum() * 0.0
    return (res[valid] ** 2).mean()


def smoothness_loss(velocity, laplacian, alpha, gamma):
    return ((-alpha * laplacian + gamma * velocity) ** 2).sum(-1).mean()


def volume_loss(divergence):
    return divergence.abs().mean()


def rate_of_deformation(jac_v):
    return 0.5 * (jac_v + jac_v.transpose(-1, -2))


def deviatoric_invariant(D):
    """Second deviatoric invariant ``tr(D D)/2 - tr(D)^2/6``."""
    tr = D.diagonal(dim1=-2, dim2=-1).sum(-1)
    tr_dd = (D * D.transpose(-1, -2)).sum((-1, -2))
    return 0.5 * tr_dd - tr**2 / 6.0


def distortion_loss(D, sym_tol=1e-8):
    asym = (D - D.transpose(-1, -2)).abs().max() if D.numel() else 0.0
    if asym > sym_tol:
        raise ValueError("distortion_loss expects a symmetric tensor; pass rate_of_deformation output")
    return deviatoric_invariant(D).abs().mean()


def tangent_projector(grad_phi, eps=GRAD_EPS):
    n = _unit(grad_phi, eps)
    eye = torch.eye(3, dtype=grad_phi.dtype, device=grad_phi.device)
    return eye - n[:, :, None] * n[:, None, :]


def stretching_integrand(jac_v, projector):
    strain = jac_v.transpose(-1, -2) @ jac_v + jac_v + jac_v.transpose(-1, -2)
    proj = projector.transpose(-1, -2) @ strain @ projector
    return torch.sqrt((proj**2).sum((-1, -2)) + 1e-30)


def stretching_loss(jac_v, projector):
    return stretching_integrand(jac_v, projector).mean()


def normal_deformation_loss(normals_t, normals_t1, jac_v):
    """Mean ``|n_t - F^T n_{t+1} / |F^T n_{t+1}||^2`` with ``F = I + jac_v``.

    ``jac_v`` is the velocity Jacobian scaled by the time step between the
    two normals.
    """
    if normals_t is None or normals_t1 is None:
        raise ValueError("normal deformation loss needs normals at both time steps")
    eye = torch.eye(3, dtype=jac_v.dtype, device=jac_v.device)
    F = eye + jac_v
    pulled = torch.einsum("nji,nj->ni", F, normals_t1)
    pulled = _unit(pulled)
    return ((normals_t - pulled) ** 2).sum(-1).mean()


def matching_loss(matched_pairs, velocity_field, code, integrator=IntegratorConfig()):
    """Mean squared endpoint error after advecting sources from t=0 to t=1."""
    pairs = torch.as_tensor(matched_pairs, dtype=velocity_field.dtype)
    if pairs.numel() == 0:
        raise ValueError("pair has no correspondences")
    x1 = integrate(velocity_field, pairs[:, 0], code.to(pairs.dtype), 0.0, 1.0, integrator)
    return ((x1 - pairs[:, 1]) ** 2).sum(-1).mean()


def reconstruction_terms(phi_field, surface_points_0, surface_points_1, volume_points, code, offsurface_points=None):
    """Pin ``S_0``/``S_1`` to the inputs and keep ``phi`` distance-like at t in {0, 1}.

    The off-surface repulsion is evaluated at ``offsurface_points`` when
    given; near-surface samples would otherwise push the zero set away.
    """
    dtype = phi_field.dtype
    z = code.to(dtype)
    out = {}
    for name, pts, tval in (("boundary_0", surface_points_0, 0.0), ("boundary_1", surface_points_1, 1.0)):
        x = torch.as_tensor(pts, dtype=dtype)
        t = torch.full((len(x), 1), tval, dtype=dtype)
        out[name] = phi_field(x, t, z.expand(len(x), -1)).abs().mean()
    xv = torch.as_tensor(volume_points, dtype=dtype)
    xo = xv if offsurface_points is None else torch.as_tensor(offsurface_points, dtype=dtype)
    eik, off = [], []
    for tval in (0.0, 1.0):
        t = torch.full((len(xv), 1), tval, dtype=dtype)
        pt = phi_terms(phi_field, xv, t, z.expand(len(xv), -1), create_graph=True, need_dt=False)
        eik.append((torch.linalg.norm(pt["grad"], dim=-1) - 1.0) ** 2)
        to = torch.full((len(xo), 1), tval, dtype=dtype)
        off.append(torch.exp(-100.0 * phi_field(xo, to, z.expand(len(xo), -1)).abs()))
    out["eikonal"] = torch.cat(eik).mean()
    out["offsurface"] = torch.cat(off).mean()
    return out


def reconstruction_loss(phi_field, surface_points_0, surface_points_1, volume_points, code, offsurface_points=None):
    terms = reconstruction_terms(
        phi_field, surface_points_0, surface_points_1, volume_points, code, offsurface_points
    )
    return sum(terms.values())


def total_loss(terms: dict, weights: LossWeights):
    """Weighted sum of the named terms.

    Returns ``(total, contributions)`` where ``contributions[name]`` is
    ``weight * term``; terms whose weight is 0 are skipped (not evaluated
    as ``0 * nan``).
    """
    contributions = {}
    total = None
    for name, value in terms.items():
        if name not in WEIGHT_FOR_TERM:
            contributions[name] = value
        else:
            w = weights.weight(name)
            if w == 0.0:
                continue
            contributions[name] = w * value
        total = contributions[name] if total is None else total + contributions[name]
    if total is None:
        total = torch.zeros((), dtype=torch.float64)
    return total, contributions


# --------------------------------------------------------------------------
# batch evaluation
# --------------------------------------------------------------------------


def compute_terms(
    phi_field,
    velocity_field,
    batch: SampleBatch,
    weights: LossWeights,
    integrator: IntegratorConfig = IntegratorConfig(),
    laplacian_mode: str = "exact",
    laplacian_points: int | None = None,
    fd_step: float = 1e-3,
    diagnostics: dict | None = None,
) -> dict:
    """Evaluate every enabled loss term on ``batch``.

    Terms whose weight is zero are not computed, which is what keeps the
    ablation runs cheap.
    """
    dtype = phi_field.dtype
    z = batch.code.to(dtype)
    times = np.asarray(batch.times, dtype=np.float64)
    xv = torch.as_tensor(batch.volume_points, dtype=dtype)
    nv, nt = xv.shape[0], len(times)
    x = xv.repeat(nt, 1)
    t = torch.as_tensor(np.repeat(times, nv), dtype=dtype)[:, None]
    zz = z.expand(x.shape[0], -1)

    need_v = any(weights.weight(k) > 0 for k in ("L_i", "L_s", "L_v", "L_st", "L_d"))
    need_phi = weights.lambda_i > 0 or weights.lambda_st > 0
    terms: dict = {}

    if need_v or need_phi:
        x = x.detach().requires_grad_(True)
    if need_phi:
        pt = phi_terms(phi_field, x, t, zz, create_graph=True, need_dt=weights.lambda_i > 0)
    if need_v:
        vt = velocity_terms(velocity_field, x, t, zz, create_graph=True)
        if weights.lambda_i > 0:
            terms["L_i"] = level_set_loss(
                pt["phi"], pt["dt"], pt["grad"], vt["v"], vt["jac"], weights.lambda_l,
                diagnostics=diagnostics,
            )
        if weights.lambda_v > 0:
            terms["L_v"] = volume_loss(vt["div"])
        if weights.lambda_d > 0:
            terms["L_d"] = distortion_loss(rate_of_deformation(vt["jac"]))
        if weights.lambda_st > 0:
            valid = gradient_mask(pt["grad"])
            if torch.any(valid):
                proj = tangent_projector(pt["grad"][valid])
                terms["L_st"] = stretching_loss(vt["jac"][valid], proj)
            else:
                terms["L_st"] = vt["jac"].sum() * 0.0
        if weights.lambda_s > 0:
            if laplacian_points is not None and laplacian_points < nv:
                idx = np.concatenate([k * nv + np.arange(laplacian_points) for k in range(nt)])
                idx = torch.as_tensor(idx)
                xs, ts, zs = xv.repeat(nt, 1)[idx], t[idx], zz[idx]
            else:
                xs, ts, zs = xv.repeat(nt, 1), t, zz
            st = velocity_terms(
                velocity_field, xs, ts, zs, create_graph=True, need_jacobian=False,
                laplacian=laplacian_mode, fd_step=fd_step,
            )
            terms["L_s"] = smoothness_loss(st["v"], st["lap"], weights.alpha, weights.gamma)

    if weights.lambda_m > 0:
        terms["L_m"] = matching_loss(batch.matched_pairs, velocity_field, z, integrator)

    if weights.lambda_n > 0:
        terms["L_n"] = _normal_chain_loss(phi_field, velocity_field, batch, z, times, integrator)

    rec = reconstruction_terms(
        phi_field, batch.surface_points_0, batch.surface_points_1, batch.volume_points, z,
        batch.offsurface_points,
    )
    terms["L_recon"] = sum(rec.values())
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise NumericalError(f"non-finite loss term {name}")
    return terms


def _normal_chain_loss(phi_field, velocity_field, batch, z, times, integrator):
    """Normal transport residual along trajectories of the source surface samples.

    The first normal of every chain is the input normal; later ones come
    from the implicit field at the advected positions.
    """
    if batch.surface_normals_0 is None:
        raise ValueError("lambda_n > 0 but the source cloud has no normals")
    dtype = phi_field.dtype
    x = torch.as_tensor(batch.surface_points_0, dtype=dtype)
    n_prev = torch.as_tensor(batch.surface_normals_0, dtype=dtype)
    zz = z.expand(len(x), -1)
    losses = []
    for k in range(len(times) - 1):
        t0, t1 = float(times[k]), float(times[k + 1])
        dt = t1 - t0
        tt = torch.full((len(x), 1), t0, dtype=dtype)
        x = x if x.requires_grad else x.detach().requires_grad_(True)
        jac = velocity_terms(velocity_field, x, tt, zz, create_graph=True)["jac"]
        x_next = integrate(velocity_field, x, z, t0, t1, integrator)
        tt1 = torch.full((len(x), 1), t1, dtype=dtype)
        g = phi_terms(phi_field, x_next, tt1, zz, create_graph=True, need_dt=False)["grad"]
        n_next = _unit(g)
        losses.append(normal_deformation_loss(n_prev, n_next, dt * jac))
        x, n_prev = x_next, n_next
    return torch.stack(losses).mean()
