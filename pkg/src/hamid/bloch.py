"""Bloch-vector dynamics of a driven two-level system with Lindblad decoherence.

Conventions
-----------
* hbar = 1; ``d`` and every rate share one inverse-time unit.
* H = (d/2) (sin(theta) sigma_x + cos(theta) sigma_z), measured along z.
* Bloch components: x = 2 Re rho_01, y = 2 Im rho_01, z = rho_00 - rho_11,
  where |0> is the z = +1 state.
* Jump operators: sqrt(gamma_z) sigma_z, sqrt(gamma_plus) |0><1| (pumps
  toward z = +1) and sqrt(gamma_minus) |1><0| (relaxes toward z = -1).

With these choices the equations of motion are the affine system

    dx/dt =  d cos(theta) y                    - gc x
    dy/dt =  d (sin(theta) z - cos(theta) x)   - gc y
    dz/dt = -d sin(theta) y - (g+ + g-) z + (g+ - g-)

with coherence decay ``gc = 2 gamma_z + (gamma_plus + gamma_minus) / 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .expm import expm

__all__ = [
    "HamiltonianParams",
    "DecoherenceRates",
    "BlochVector",
    "AffineGenerator",
    "DegenerateSteadyStateError",
    "closed_evolution_z",
    "build_generator",
    "propagate",
    "steady_state",
    "decay_difference",
    "NORM_TOLERANCE",
]

#: allowed excess of |r| over 1 along propagated trajectories
NORM_TOLERANCE = 1e-9


class DegenerateSteadyStateError(ValueError):
    """The affine generator has no unique fixed point."""


@dataclass(frozen=True)
class HamiltonianParams:
    d: float
    theta: float

    def __post_init__(self):
        if not (math.isfinite(self.d) and math.isfinite(self.theta)):
            raise ValueError("Hamiltonian parameters must be finite")
        if self.d < 0:
            raise ValueError(f"d must be >= 0, got {self.d}")
        if not 0.0 <= self.theta <= math.pi:
            raise ValueError(f"theta must lie in [0, pi], got {self.theta}")

    @property
    def sigma_x(self) -> float:
        """Coefficient of sigma_x in H."""
        return 0.5 * self.d * math.sin(self.theta)

    @property
    def sigma_z(self) -> float:
        """Coefficient of sigma_z in H."""
        return 0.5 * self.d * math.cos(self.theta)


@dataclass(frozen=True)
class DecoherenceRates:
    gamma_z: float = 0.0
    gamma_plus: float = 0.0
    gamma_minus: float = 0.0

    def __post_init__(self):
        for name in ("gamma_z", "gamma_plus", "gamma_minus"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")

    @property
    def is_zero(self) -> bool:
        return self.gamma_z == 0 and self.gamma_plus == 0 and self.gamma_minus == 0


class BlochVector(NamedTuple):
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)


@dataclass(frozen=True)
class AffineGenerator:
    """dr/dt = linear_part @ r + constant_part."""

    linear_part: np.ndarray
    constant_part: np.ndarray

    def __call__(self, r) -> np.ndarray:
        return self.linear_part @ np.asarray(r, dtype=float) + self.constant_part

    def augmented(self) -> np.ndarray:
        """4x4 homogeneous-coordinate form [[A, b], [0, 0]]."""
        out = np.zeros((4, 4))
        out[:3, :3] = self.linear_part
        out[:3, 3] = self.constant_part
        return out


def closed_evolution_z(h: HamiltonianParams, t: float) -> float:
    """z(t) without decoherence, starting from z = 1."""
    if t < 0:
        raise ValueError("t must be >= 0")
    s2 = math.sin(h.theta) ** 2
    return math.cos(h.d * t) * s2 + (1.0 - s2)


def build_generator(h: HamiltonianParams, rates: DecoherenceRates) -> AffineGenerator:
    d, c, s = h.d, math.cos(h.theta), math.sin(h.theta)
    pop_sum = rates.gamma_plus + rates.gamma_minus
    gc = 2.0 * rates.gamma_z + 0.5 * pop_sum
    a = np.array([
        [-gc, d * c, 0.0],
        [-d * c, -gc, d * s],
        [0.0, -d * s, -pop_sum],
    ])
    b = np.array([0.0, 0.0, rates.gamma_plus - rates.gamma_minus])
    return AffineGenerator(a, b)


def _as_vector(init) -> np.ndarray:
    if isinstance(init, BlochVector):
        return init.as_array()
    r = np.asarray(init, dtype=float).reshape(-1)
    if r.shape != (3,):
        raise ValueError("initial Bloch vector must have three components")
    return r


def step_matrix(h: HamiltonianParams, rates: DecoherenceRates, dt: float) -> np.ndarray:
    """Exact 4x4 homogeneous propagator over one step ``dt``."""
    return expm(build_generator(h, rates).augmented() * dt)


def propagate(h: HamiltonianParams, rates: DecoherenceRates, init, dt: float,
              n_t: int) -> np.ndarray:
    """Bloch vectors at t = 0, dt, ..., (n_t - 1) dt as an ``(n_t, 3)`` array.

    Each step applies the exact exponential of the augmented affine
    generator, so there is no integrator tolerance to tune.
    """
    r0 = _as_vector(init)
    if not (math.isfinite(dt) and np.all(np.isfinite(r0))):
        raise ValueError("propagate needs finite dt and initial state")
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    if int(n_t) != n_t or n_t < 1:
        raise ValueError(f"n_t must be a positive integer, got {n_t}")
    phi = step_matrix(h, rates, dt)
    lin, const = phi[:3, :3], phi[:3, 3]
    out = np.empty((int(n_t), 3))
    out[0] = r0
    for k in range(1, int(n_t)):
        out[k] = lin @ out[k - 1] + const
    return out


def steady_state(h: HamiltonianParams, rates: DecoherenceRates) -> BlochVector:
    """Asymptotic Bloch vector from the closed-form steady-state relations."""
    d, c, s = h.d, math.cos(h.theta), math.sin(h.theta)
    pop_sum = rates.gamma_plus + rates.gamma_minus
    width = 4.0 * rates.gamma_z + pop_sum
    k_den = 4.0 * d * d * c * c + width * width
    if k_den == 0.0:
        raise DegenerateSteadyStateError("no dissipation and no sigma_z drive")
    k = 2.0 * d * s * width / k_den
    z_den = pop_sum + d * s * k
    # relative guard; z_den is a sum of non-negative terms
    if z_den <= 1e-300 or z_den < 1e-14 * (abs(d) + width):
        raise DegenerateSteadyStateError(
            "steady state is not unique (populations are not relaxed)"
        )
    z_inf = (rates.gamma_plus - rates.gamma_minus) / z_den
    y_inf = k * z_inf
    x_inf = 2.0 * d * c * y_inf / width
    return BlochVector(x_inf, y_inf, z_inf)


def decay_difference(rates: DecoherenceRates, t: float) -> float:
    """z_1(t) - z_{-1}(t) for the undriven system."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return 2.0 * math.exp(-t * (rates.gamma_plus + rates.gamma_minus))
