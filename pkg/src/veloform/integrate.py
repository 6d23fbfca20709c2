"""Explicit time integration of ``dx/dt = V(x, t, z)``.

The integrator is written in torch so the same code serves inference (no
graph) and the matching loss during training (graph kept through every
stage).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigError, NumericalError

SCHEMES = ("euler", "rk4")


@dataclass(frozen=True)
class IntegratorConfig:
    scheme: str = "rk4"
    substeps: int = 16  # per unit time

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown integrator scheme {self.scheme!r}; expected one of {SCHEMES}")
        if int(self.substeps) < 1:
            raise ConfigError("integrator substeps must be >= 1")

    @property
    def order(self) -> int:
        return 4 if self.scheme == "rk4" else 1

    def n_steps(self, t_from: float, t_to: float) -> int:
        return max(1, int(math.ceil(abs(t_to - t_from) * self.substeps - 1e-9)))


def _check(x: torch.Tensor, step: int):
    if not torch.all(torch.isfinite(x)):
        raise NumericalError(f"non-finite positions at integration substep {step}")


def integrate(
    field,
    x: torch.Tensor,
    z: torch.Tensor,
    t_from: float,
    t_to: float,
    config: IntegratorConfig = IntegratorConfig(),
    return_path: bool = False,
):
    """Advect ``x`` from ``t_from`` to ``t_to`` (either direction).

    With ``return_path`` the positions after every substep are returned as
    well, as a list starting with ``x``.
    """
    n = config.n_steps(t_from, t_to)
    h = (t_to - t_from) / n
    zz = z.expand(x.shape[0], -1) if z.ndim == 1 else z
    path = [x] if return_path else None

    def vel(p, t):
        tt = torch.full((p.shape[0], 1), t, dtype=p.dtype, device=p.device)
        return field(p, tt, zz)

    for k in range(n):
        t = t_from + k * h
        if config.scheme == "euler":
            x = x + h * vel(x, t)
        else:
            k1 = vel(x, t)
            k2 = vel(x + 0.5 * h * k1, t + 0.5 * h)
            k3 = vel(x + 0.5 * h * k2, t + 0.5 * h)
            k4 = vel(x + h * k3, t + h)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        _check(x, k + 1)
        if return_path:
            path.append(x)
    return (x, path) if return_path else x
