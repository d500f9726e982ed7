"""Fourier-domain models of the z record.

``model_delta``, ``model_dephasing`` and ``model_general`` are the
continuous-time transforms Z(omega) = int_0^inf z'(t) exp(-i omega t) dt
(with the impulse constant replaced by a free amplitude).  The same
rational functions are mapped exactly onto a sampled, finite record by
:func:`record_spectrum`, which is what the fitter compares to a
normalised DFT.  In the DFT convention used by :mod:`hamid.spectrum`
bin n is approximately ``conj(Z(omega_n)) / (N dt)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bloch import (
    DecoherenceRates,
    DegenerateSteadyStateError,
    HamiltonianParams,
    steady_state,
)
from .expm import expm

__all__ = [
    "MODELS",
    "PARAM_NAMES",
    "ModelParams",
    "ModelEvaluationError",
    "model_delta",
    "model_dephasing",
    "model_general",
    "transfer_polynomials",
    "record_spectrum",
    "box_spectrum",
]

MODELS = ("delta", "dephasing", "general")
PARAM_NAMES = ("d", "theta", "gamma_z", "gamma_plus", "gamma_minus", "amplitude")

_POLE_GUARD = 1e-14


class ModelEvaluationError(ArithmeticError):
    """The model denominator vanishes at a requested frequency."""


@dataclass(frozen=True)
class ModelParams:
    h: HamiltonianParams
    rates: DecoherenceRates = field(default_factory=DecoherenceRates)
    amplitude: float = 1.0
    z_inf: float | None = None

    def __post_init__(self):
        if not (self.amplitude > 0 and math.isfinite(self.amplitude)):
            raise ValueError(f"amplitude must be positive, got {self.amplitude}")

    @classmethod
    def from_values(cls, d, theta, gamma_z=0.0, gamma_plus=0.0, gamma_minus=0.0,
                    amplitude=1.0, z_inf=None) -> "ModelParams":
        return cls(HamiltonianParams(float(d), float(theta)),
                   DecoherenceRates(float(gamma_z), float(gamma_plus), float(gamma_minus)),
                   float(amplitude), z_inf)

    def as_dict(self) -> dict[str, float]:
        return {
            "d": self.h.d,
            "theta": self.h.theta,
            "gamma_z": self.rates.gamma_z,
            "gamma_plus": self.rates.gamma_plus,
            "gamma_minus": self.rates.gamma_minus,
            "amplitude": self.amplitude,
        }

    def replace(self, **values) -> "ModelParams":
        merged = {**self.as_dict(), **values}
        return ModelParams.from_values(**merged)

    def steady_state(self):
        """Model steady state; (0, 0, 0) when populations never relax."""
        if self.rates.gamma_plus == 0 and self.rates.gamma_minus == 0:
            return (0.0, 0.0, 0.0)
        try:
            return tuple(steady_state(self.h, self.rates))
        except DegenerateSteadyStateError:
            return (0.0, 0.0, 0.0)

    @property
    def z_infinity(self) -> float:
        return self.steady_state()[2] if self.z_inf is None else float(self.z_inf)


def _omega(omega):
    return np.asarray(omega, dtype=float)


def model_delta(p: ModelParams, omega, bin_width: float | None = None):
    """Peak heights of the decoherence-free spectrum.

    amplitude*cos^2(theta) at omega = 0, amplitude*sin^2(theta)/2 at
    omega = +-d and zero elsewhere.  With ``bin_width`` a frequency counts
    as on a peak when it lies within half a bin of it.
    """
    w = _omega(omega)
    tol = 0.5 * bin_width if bin_width else 1e-12 * max(1.0, p.h.d)
    c2 = math.cos(p.h.theta) ** 2
    s2 = 1.0 - c2
    out = np.zeros_like(w)
    on_peak = np.abs(np.abs(w) - p.h.d) < tol
    out[on_peak] = 0.5 * s2 * p.amplitude
    at_zero = np.abs(w) < tol
    out[at_zero] = c2 * p.amplitude if p.h.d >= tol else p.amplitude
    return out if out.ndim else float(out)


def model_dephasing(p: ModelParams, omega):
    """Transform of z(t) under pure dephasing, started from z = 1."""
    w = _omega(omega)
    d, g = p.h.d, p.rates.gamma_z
    c2 = math.cos(p.h.theta) ** 2
    s2 = math.sin(p.h.theta) ** 2
    iw = 1j * w
    inner = 2.0 * g + iw
    den = iw + d * d * inner * s2 / (inner * inner + d * d * c2)
    if np.any(np.abs(den) < _POLE_GUARD):
        raise ModelEvaluationError("dephasing model pole (omega = 0 with gamma_z = 0)")
    return p.amplitude / den


def _shifted_initial_state(p: ModelParams, init_z: float):
    x_inf, y_inf, z_inf = p.steady_state()
    return -x_inf, -y_inf, init_z - z_inf


def model_general(p: ModelParams, omega, init_z: float = 1.0):
    """Transform of the shifted record z'(t) = z(t) - z(inf).

    Dephasing plus absorption/emission.  The denominator is the one of
    the pure-dephasing model with the population relaxation added; the
    numerator carries the shifted initial state (-x_inf, -y_inf,
    z(0) - z_inf) through L-type terms 1/(M -+ 2 i d cos(theta)).
    """
    w = _omega(omega)
    d = p.h.d
    c, s = math.cos(p.h.theta), math.sin(p.h.theta)
    r = p.rates
    pop_sum = r.gamma_plus + r.gamma_minus
    width = 4.0 * r.gamma_z + pop_sum
    x0, y0, z0 = _shifted_initial_state(p, init_z)
    iw = 1j * w
    m = 2.0 * iw + width
    w_plus = y0 + 1j * x0
    w_minus = y0 - 1j * x0
    lorentz = w_plus / (m - 2j * d * c) + w_minus / (m + 2j * d * c)
    num = z0 - d * s * lorentz
    den = iw + pop_sum + 2.0 * d * d * m * s * s / (m * m + 4.0 * d * d * c * c)
    if np.any(np.abs(den) < _POLE_GUARD):
        raise ModelEvaluationError("general model pole at this frequency")
    return p.amplitude * num / den


def transfer_polynomials(p: ModelParams, model: str = "general", init_z: float = 1.0):
    """Numerator and denominator of Z(s) in the Laplace variable s = i omega.

    Coefficients are highest power first and the denominator is monic.
    The amplitude is not included.
    """
    d = p.h.d
    c, s = math.cos(p.h.theta), math.sin(p.h.theta)
    if model in ("delta", "dephasing"):
        g = 0.0 if model == "delta" else p.rates.gamma_z
        pop_sum, width = 0.0, 4.0 * g
        x0, y0, z0 = 0.0, 0.0, float(init_z)
    elif model == "general":
        pop_sum = p.rates.gamma_plus + p.rates.gamma_minus
        width = 4.0 * p.rates.gamma_z + pop_sum
        x0, y0, z0 = _shifted_initial_state(p, init_z)
    else:
        raise ValueError(f"unknown model {model!r}")
    # M = 2 s + width;  M^2 + 4 d^2 c^2 = 4 s^2 + 4 width s + width^2 + 4 d^2 c^2
    quad = np.array([4.0, 4.0 * width, width * width + 4.0 * d * d * c * c])
    num = z0 * quad - d * s * np.array([0.0, 4.0 * y0, 2.0 * width * y0 - 4.0 * d * c * x0])
    den = np.polymul([1.0, pop_sum], quad) + np.array(
        [0.0, 0.0, 4.0 * d * d * s * s, 2.0 * d * d * s * s * width]
    )
    return num / den[0], den / den[0]


def box_spectrum(n_record: int, n_padded: int, bins) -> np.ndarray:
    """Normalised DFT of a unit constant over the first ``n_record`` samples."""
    bins = np.asarray(bins)
    q = np.exp(2j * np.pi * bins / n_padded)
    q_n = np.exp(2j * np.pi * ((bins * n_record) % n_padded) / n_padded)
    out = np.empty(len(bins), dtype=complex)
    dc = (bins % n_padded) == 0
    out[dc] = n_record
    out[~dc] = (1.0 - q_n[~dc]) / (1.0 - q[~dc])
    return out / n_padded


def _geometric(ratio, ratio_n, n_record):
    """sum_{k < n_record} ratio^k with ratio_n = ratio^n_record."""
    gap = 1.0 - ratio
    near_one = np.abs(gap) < 1e-9
    out = np.empty(np.broadcast(ratio, ratio_n).shape, dtype=complex)
    safe_gap = np.where(near_one, 1.0, gap)
    out[...] = (1.0 - ratio_n) / safe_gap
    series = n_record - gap * n_record * (n_record - 1) / 2.0
    return np.where(near_one, series, out)


def record_spectrum(p: ModelParams, dt: float, n_record: int, n_padded: int | None = None,
                    bins=None, model: str = "general", init_z: float = 1.0,
                    shift: float = 0.0) -> np.ndarray:
    """Normalised DFT of the model's sampled record of ``z - shift``.

    The impulse response of Z(s) is sampled at t_k = k dt for
    k < n_record, zero-padded to ``n_padded`` and transformed with the
    +i kernel.  Simple poles use the residue expansion; clustered poles
    fall back to a companion-matrix resolvent.  For the general model the
    steady-state offset ``amplitude * z_inf - shift`` enters as a box.
    """
    n_padded = n_record if n_padded is None else int(n_padded)
    bins = np.arange(n_padded // 2 + 1) if bins is None else np.asarray(bins)
    num, den = transfer_polynomials(p, model, init_z)
    q = np.exp(2j * np.pi * bins / n_padded)
    q_n = np.exp(2j * np.pi * ((bins * n_record) % n_padded) / n_padded)

    poles = np.roots(den)
    scale = max(1.0, float(np.max(np.abs(poles))))
    gaps = np.abs(poles[:, None] - poles[None, :])
    np.fill_diagonal(gaps, np.inf)
    if np.min(gaps) > 1e-5 * scale:
        dden = np.polyder(den)
        residues = np.polyval(num, poles) / np.polyval(dden, poles)
        mu = np.exp(poles * dt)
        mu_n = np.exp(poles * dt * n_record)
        total = np.zeros(len(bins), dtype=complex)
        for r_j, mu_j, mu_jn in zip(residues, mu, mu_n):
            total += r_j * _geometric(q * mu_j, q_n * mu_jn, n_record)
    else:
        total = _companion_record(num, den, dt, n_record, q, q_n)
    values = p.amplitude * total / n_padded

    offset = -shift
    if model == "general":
        offset += p.amplitude * p.z_infinity
    if offset != 0.0:
        values = values + offset * box_spectrum(n_record, n_padded, bins)
    return values


def _companion_record(num, den, dt, n_record, q, q_n):
    order = len(den) - 1
    comp = np.zeros((order, order))
    comp[:-1, 1:] = np.eye(order - 1)
    comp[-1, :] = -den[:0:-1]
    b = np.zeros(order)
    b[-1] = 1.0
    c_row = np.zeros(order)
    padded_num = np.concatenate([np.zeros(order - len(num)), num])
    c_row[:] = padded_num[::-1]
    step = expm(comp * dt)
    tail = expm(comp * dt * n_record) @ b
    lhs = np.eye(order)[None, :, :] - q[:, None, None] * step[None, :, :]
    rhs = b[None, :] - q_n[:, None] * tail[None, :]
    singular = np.abs(np.linalg.det(lhs)) < 1e-10
    sol = np.empty((len(q), order), dtype=complex)
    if np.any(~singular):
        sol[~singular] = np.linalg.solve(lhs[~singular], rhs[~singular][..., None])[..., 0]
    for i in np.nonzero(singular)[0]:
        sol[i] = _matrix_geometric_sum(q[i] * step, n_record) @ b
    return sol @ c_row


def _matrix_geometric_sum(x: np.ndarray, n: int) -> np.ndarray:
    """sum_{k < n} x^k via powers of the block matrix [[x, I], [0, I]]."""
    order = x.shape[0]
    block = np.zeros((2 * order, 2 * order), dtype=complex)
    block[:order, :order] = x
    block[:order, order:] = np.eye(order)
    block[order:, order:] = np.eye(order)
    result = np.eye(2 * order, dtype=complex)
    while n:
        if n & 1:
            result = result @ block
        block = block @ block
        n >>= 1
    return result[:order, order:]
