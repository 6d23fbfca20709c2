"""Finite-difference health checks for derivatives and loss gradients.

Every check runs in float64 and compares the autograd value against a
central difference at random probes. The relative error of one probe is
``|a - b| / (max(|a|, |b|) + ATOL)`` with vector norms for vector outputs.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .fields import (
    FieldArch,
    FieldQuery,
    ImplicitField,
    VelocityField,
    dphi_dt,
    eval_phi,
    eval_velocity,
    grad_phi,
    velocity_divergence,
    velocity_jacobian,
    velocity_laplacian,
)
from .losses import WEIGHT_FOR_TERM, LossWeights, SampleBatch, compute_terms
from .integrate import IntegratorConfig

ATOL = 1e-8
FIRST_ORDER_TOL = 1e-4
SECOND_ORDER_TOL = 1e-3
LOSS_TOL = 1e-3
FD_STEP = 1e-4
LAPLACIAN_FD_STEP = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    probes: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= self.tolerance)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "probes": self.probes,
            "passed": self.passed,
        }


@dataclass
class GradCheckReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list[str]:
        return [r.name for r in self.results if not r.passed]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "failures": self.failures, "checks": [r.to_dict() for r in self.results]}


def rel_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim > 1:
        a = a.reshape(len(a), -1)
        b = b.reshape(len(b), -1)
        diff = np.linalg.norm(a - b, axis=1)
        scale = np.maximum(np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1))
    else:
        diff = np.abs(a - b)
        scale = np.maximum(np.abs(a), np.abs(b))
    return diff / (scale + ATOL)


def _np(x):
    return x.detach().double().numpy()


# --------------------------------------------------------------------------
# operator checks
# --------------------------------------------------------------------------


def _fd_spatial(fn, x, t, z, h):
    cols = []
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        plus = fn(FieldQuery(x + e, t, z))
        minus = fn(FieldQuery(x - e, t, z))
        cols.append((_np(plus) - _np(minus)) / (2 * h))
    return np.stack(cols, axis=-1)


def _check_grad_phi(phi, vel, x, t, z):
    auto = _np(grad_phi(phi, FieldQuery(x, t, z)))
    ref = _fd_spatial(lambda q: eval_phi(phi, q), x, t, z, FD_STEP)
    return auto, ref, FIRST_ORDER_TOL


def _check_dphi_dt(phi, vel, x, t, z):
    auto = _np(dphi_dt(phi, FieldQuery(x, t, z)))
    ref = (_np(eval_phi(phi, FieldQuery(x, t + FD_STEP, z))) - _np(eval_phi(phi, FieldQuery(x, t - FD_STEP, z)))) / (2 * FD_STEP)
    return auto, ref, FIRST_ORDER_TOL


def _check_jacobian(phi, vel, x, t, z):
    auto = _np(velocity_jacobian(vel, FieldQuery(x, t, z)))
    ref = _fd_spatial(lambda q: eval_velocity(vel, q), x, t, z, FD_STEP)
    return auto, ref, FIRST_ORDER_TOL


def _check_divergence(phi, vel, x, t, z):
    auto = _np(velocity_divergence(vel, FieldQuery(x, t, z)))
    ref = np.trace(_fd_spatial(lambda q: eval_velocity(vel, q), x, t, z, FD_STEP), axis1=1, axis2=2)
    return auto, ref, FIRST_ORDER_TOL


def _check_laplacian(phi, vel, x, t, z):
    q = FieldQuery(x, t, z)
    auto = _np(velocity_laplacian(vel, q, "exact"))
    ref = _np(velocity_laplacian(vel, q, "finite_difference", LAPLACIAN_FD_STEP))
    return auto, ref, SECOND_ORDER_TOL


OPERATOR_CHECKS: dict[str, Callable] = {
    "grad_phi": _check_grad_phi,
    "dphi_dt": _check_dphi_dt,
    "velocity_jacobian": _check_jacobian,
    "velocity_divergence": _check_divergence,
    "velocity_laplacian": _check_laplacian,
}


def check_operators(phi, vel, code, probes: int = 100, seed: int = 0, checks=None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.9, 0.9, size=(probes, 3))
    t = rng.uniform(0.01, 0.99, size=probes)
    z = np.asarray(code, dtype=np.float64)
    out = []
    for name, fn in (checks or OPERATOR_CHECKS).items():
        auto, ref, tol = fn(phi, vel, x, t, z)
        out.append(CheckResult(name, float(rel_error(auto, ref).max()), tol, probes))
    return out


# --------------------------------------------------------------------------
# loss-gradient checks
# --------------------------------------------------------------------------


def _probe_batch(code_dim: int, rng: np.random.Generator, n: int = 24) -> SampleBatch:
    def sphere(k, r, c):
        d = rng.normal(size=(k, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return c + r * d, d

    s0, n0 = sphere(n, 0.5, np.zeros(3))
    s1, _ = sphere(n, 0.5, np.array([0.2, 0.0, 0.0]))
    matched = np.stack([s0[:8], s0[:8] + np.array([0.2, 0.0, 0.0])], axis=1)
    return SampleBatch(
        volume_points=rng.uniform(-0.9, 0.9, size=(n, 3)),
        surface_points_0=s0,
        surface_points_1=s1,
        matched_pairs=matched,
        times=np.array([0.0, 0.5, 1.0]),
        code=torch.as_tensor(rng.normal(size=code_dim) * 0.3),
        surface_normals_0=n0,
    )


def _term_fn(name: str, phi, vel, batch: SampleBatch, integrator):
    base = {k: 0.0 for k in WEIGHT_FOR_TERM.values()}
    base["lambda_recon"] = 1.0
    base[WEIGHT_FOR_TERM[name]] = 1.0
    weights = LossWeights(**base, lambda_l=1.0, alpha=0.1, gamma=1.0)

    def value():
        return compute_terms(phi, vel, batch, weights, integrator, "exact", None)[name]

    return value


def check_loss_gradients(
    phi, vel, code, probes: int = 100, seed: int = 0, terms=None, step: float = 1e-6
) -> list[CheckResult]:
    """Directional derivative of every loss term w.r.t. all parameters (fields and code)."""
    rng = np.random.default_rng(seed + 1)
    batch = _probe_batch(len(code), rng)
    code_param = torch.nn.Parameter(torch.as_tensor(np.asarray(code, dtype=np.float64)))
    batch.code = code_param
    params = list(phi.parameters()) + list(vel.parameters()) + [code_param]
    integrator = IntegratorConfig("rk4", 4)
    out = []
    for name in terms or WEIGHT_FOR_TERM:
        fn = _term_fn(name, phi, vel, batch, integrator)
        loss = fn()
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        grads = [g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)]
        errs = []
        for _ in range(probes):
            dirs = [torch.as_tensor(rng.normal(size=p.shape), dtype=p.dtype) for p in params]
            analytic = float(sum((g * d).sum() for g, d in zip(grads, dirs)))
            with torch.no_grad():
                for p, d in zip(params, dirs):
                    p.add_(step * d)
            plus = float(fn().detach())
            with torch.no_grad():
                for p, d in zip(params, dirs):
                    p.sub_(2 * step * d)
            minus = float(fn().detach())
            with torch.no_grad():
                for p, d in zip(params, dirs):
                    p.add_(step * d)
            errs.append(rel_error([analytic], [(plus - minus) / (2 * step)])[0])
        out.append(CheckResult(f"grad[{name}]", float(np.max(errs)), LOSS_TOL, probes))
    return out


def fresh_fields(code_dim: int = 8, hidden_layers: int = 2, hidden_units: int = 16, seed: int = 0):
    torch.manual_seed(seed)
    phi = ImplicitField(code_dim, FieldArch(hidden_layers, hidden_units)).double()
    vel = VelocityField(code_dim, FieldArch(hidden_layers, hidden_units)).double()
    return phi, vel


def run_check_grads(
    phi=None,
    vel=None,
    code=None,
    probes: int = 100,
    loss_probes: int = 100,
    seed: int = 0,
    operator_checks=None,
) -> GradCheckReport:
    """Run the operator suite and the loss-gradient suite.

    Fields are copied and promoted to float64, so a trained (float32)
    checkpoint can be checked without being modified.
    """
    if phi is None or vel is None:
        phi, vel = fresh_fields(seed=seed)
    else:
        phi, vel = copy.deepcopy(phi).double(), copy.deepcopy(vel).double()
    if code is None:
        code = np.random.default_rng(seed).normal(size=phi.code_dim) * 0.3
    code = np.asarray(torch.as_tensor(code).detach().double())
    report = GradCheckReport()
    report.results += check_operators(phi, vel, code, probes, seed, operator_checks)
    if loss_probes:
        report.results += check_loss_gradients(phi, vel, code, loss_probes, seed)
    return report
