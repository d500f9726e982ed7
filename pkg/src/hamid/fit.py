"""Fitting the record models to a measured spectrum.

Free parameters are optimised in a transformed space: ``d``, the rates and
the amplitude through their logarithms, ``theta`` directly with reflection
at 0 and pi, and a split fraction of a known rate sum through a logit.
Covariances are reported for the natural parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .lm import LMResult, levenberg_marquardt
from .measurement import TimeSeries
from .models import MODELS, ModelParams, record_spectrum
from .spectrum import Spectrum

__all__ = [
    "FitConstraints",
    "FitResult",
    "AuxFit",
    "TailNotSettledError",
    "DegenerateDecayError",
    "REPORT_NAMES",
    "free_parameter_names",
    "spectrum_residual",
    "iterative_refit",
    "confidence_intervals",
    "fit_aux_decay",
]

REPORT_NAMES = ("d", "theta", "gamma_z", "gamma_plus", "gamma_minus", "amplitude", "sigma_z")

_CYCLE_ORDER = ("d", "gamma_z", "theta", "amplitude", "gamma_plus", "gamma_minus", "gamma_split")
_RATES = ("gamma_z", "gamma_plus", "gamma_minus")
#: log-parameterised rates stop at this fraction of the seeded d
RATE_FLOOR_FRACTION = 1e-9
_MODEL_FREE = {
    "delta": ("d", "theta", "amplitude"),
    "dephasing": ("d", "gamma_z", "theta", "amplitude"),
    "general": ("d", "gamma_z", "theta", "amplitude", "gamma_plus", "gamma_minus"),
}
_MODEL_ZERO = {
    "delta": ("gamma_z", "gamma_plus", "gamma_minus"),
    "dephasing": ("gamma_plus", "gamma_minus"),
    "general": (),
}


class TailNotSettledError(RuntimeError):
    """The end of a relaxation record still drifts beyond projection noise."""


class DegenerateDecayError(RuntimeError):
    """The relaxation records show no decay to fit."""


@dataclass(frozen=True)
class FitConstraints:
    fixed: dict = field(default_factory=dict)
    ratio_gamma: float | None = None  # gamma_minus / gamma_plus
    sum_gamma: float | None = None  # gamma_plus + gamma_minus

    def __post_init__(self):
        unknown = set(self.fixed) - set(_CYCLE_ORDER[:6])
        if unknown:
            raise ValueError(f"unknown fixed parameters: {sorted(unknown)}")
        if self.ratio_gamma is not None and not self.ratio_gamma >= 0:
            raise ValueError("ratio_gamma must be >= 0")
        if self.sum_gamma is not None and not self.sum_gamma >= 0:
            raise ValueError("sum_gamma must be >= 0")

    @classmethod
    def from_aux(cls, aux: dict, **fixed) -> "FitConstraints":
        """Constraints that pin both population rates from an aux fit."""
        return cls(fixed={"gamma_plus": float(aux["gamma_plus"]),
                          "gamma_minus": float(aux["gamma_minus"]), **fixed})

    def pinned_rates(self):
        """(gamma_plus, gamma_minus) when ratio and sum fix both, else None."""
        if self.ratio_gamma is None or self.sum_gamma is None:
            return None
        gp = self.sum_gamma / (1.0 + self.ratio_gamma)
        return gp, self.sum_gamma - gp


def free_parameter_names(model: str, constraints: FitConstraints | None = None):
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}")
    cons = constraints or FitConstraints()
    names = [n for n in _MODEL_FREE[model] if n not in cons.fixed]
    if model == "general":
        if cons.pinned_rates() is not None:
            names = [n for n in names if n not in ("gamma_plus", "gamma_minus")]
        elif cons.ratio_gamma is not None:
            names = [n for n in names if n != "gamma_minus"]
        elif cons.sum_gamma is not None:
            names = [n for n in names if n not in ("gamma_plus", "gamma_minus")]
            if "gamma_plus" not in cons.fixed and "gamma_minus" not in cons.fixed:
                names.append("gamma_split")
    return tuple(names)


class _Packing:
    """Maps between the optimiser vector and full parameter sets."""

    def __init__(self, model, constraints, base: dict):
        self.model = model
        self.cons = constraints
        self.names = free_parameter_names(model, constraints)
        self.base = dict(base)
        for name in _MODEL_ZERO[model]:
            self.base[name] = 0.0
        self.base.update(constraints.fixed)
        pinned = constraints.pinned_rates() if model == "general" else None
        if pinned is not None:
            self.base["gamma_plus"], self.base["gamma_minus"] = pinned
        self.rate_floor = RATE_FLOOR_FRACTION * max(float(base["d"]), 1e-300)

    def natural(self, values: dict) -> dict:
        full = {**self.base, **{k: v for k, v in values.items() if k != "gamma_split"}}
        if self.model == "general":
            cons = self.cons
            if "gamma_split" in values:
                full["gamma_plus"] = cons.sum_gamma * values["gamma_split"]
                full["gamma_minus"] = cons.sum_gamma - full["gamma_plus"]
            elif cons.ratio_gamma is not None and cons.pinned_rates() is None:
                full["gamma_minus"] = cons.ratio_gamma * full["gamma_plus"]
            elif cons.sum_gamma is not None and cons.pinned_rates() is None:
                if "gamma_plus" in cons.fixed:
                    full["gamma_minus"] = cons.sum_gamma - full["gamma_plus"]
                elif "gamma_minus" in cons.fixed:
                    full["gamma_plus"] = cons.sum_gamma - full["gamma_minus"]
        return full

    @staticmethod
    def to_u(name, value):
        if name == "theta":
            return value
        if name == "gamma_split":
            value = min(max(value, 1e-12), 1 - 1e-12)
            return math.log(value / (1.0 - value))
        return math.log(max(value, 1e-300))

    @staticmethod
    def from_u(name, u):
        if name == "theta":
            return u
        if name == "gamma_split":
            return 1.0 / (1.0 + math.exp(-min(max(u, -700.0), 700.0)))
        return math.exp(min(u, 700.0))

    @staticmethod
    def dx_du(name, value):
        if name == "theta":
            return 1.0
        if name == "gamma_split":
            return value * (1.0 - value)
        return value

    def bounds(self, names):
        floor = math.log(self.rate_floor)
        lower = [0.0 if n == "theta" else floor if n in _RATES else -np.inf for n in names]
        upper = [math.pi if n == "theta" else np.inf for n in names]
        return np.array(lower), np.array(upper)

    def derived_jacobian(self, free: dict) -> np.ndarray:
        """d(report quantities)/d(free natural parameters)."""
        full = self.natural(free)
        g = np.zeros((len(REPORT_NAMES), len(self.names)))
        rows = {n: i for i, n in enumerate(REPORT_NAMES)}
        for j, name in enumerate(self.names):
            if name == "gamma_split":
                g[rows["gamma_plus"], j] = self.cons.sum_gamma
                g[rows["gamma_minus"], j] = -self.cons.sum_gamma
                continue
            g[rows[name], j] = 1.0
            if name == "gamma_plus" and self.cons.ratio_gamma is not None:
                g[rows["gamma_minus"], j] = self.cons.ratio_gamma
            if name == "d":
                g[rows["sigma_z"], j] = 0.5 * math.cos(full["theta"])
            if name == "theta":
                g[rows["sigma_z"], j] = -0.5 * full["d"] * math.sin(full["theta"])
        return g


def _params(full: dict) -> ModelParams:
    return ModelParams.from_values(
        full["d"], full["theta"], full["gamma_z"], full["gamma_plus"],
        full["gamma_minus"], full["amplitude"],
    )


def _residual_layout(n_padded: int):
    bins = np.arange(n_padded // 2 + 1)
    imag_mask = np.ones(len(bins), dtype=bool)
    imag_mask[0] = False
    if n_padded % 2 == 0:
        imag_mask[-1] = False
    return bins, imag_mask


def spectrum_residual(data: Spectrum, p: ModelParams, model: str, init_z: float = 1.0):
    """Real and imaginary parts of data - model over bins 0..Nyquist.

    Imaginary parts that vanish identically for a real record (DC and, for
    even lengths, Nyquist) are left out, so the vector has one entry per
    padded sample.
    """
    bins, imag_mask = _residual_layout(data.n_padded)
    model_values = record_spectrum(p, data.dt, data.n_original, data.n_padded, bins,
                                   model=model, init_z=init_z, shift=data.shift)
    diff = data.values[bins] - model_values
    return np.concatenate([diff.real, diff.imag[imag_mask]])


@dataclass
class FitResult:
    model: str
    estimates: ModelParams
    param_names: tuple
    covariance: np.ndarray  # unscaled (J^T J)^-1 over param_names
    report_covariance: np.ndarray  # unscaled, over REPORT_NAMES
    residual_norm: float
    n_residuals: int
    n_independent: int
    iterations: int
    cycles: int
    converged: bool
    sigma_level: float = 3.0
    history: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    eta: float | None = None
    z_inf: float | None = None

    @property
    def n_free(self) -> int:
        return len(self.param_names)

    @property
    def covariance_defined(self) -> bool:
        return self.n_independent > self.n_free

    @property
    def residual_scale(self) -> float:
        """sqrt(RSS / (m - p)) with m the number of independent samples."""
        if not self.covariance_defined:
            return math.nan
        return self.residual_norm / math.sqrt(self.n_independent - self.n_free)

    @property
    def values(self) -> dict:
        out = self.estimates.as_dict()
        out["sigma_z"] = 0.5 * out["d"] * math.cos(out["theta"])
        return out

    @property
    def confidence(self) -> dict:
        return confidence_intervals(self, self.sigma_level)

    def fractional_uncertainty(self, sigma_level: float = 1.0) -> dict:
        conf = confidence_intervals(self, sigma_level)
        vals = self.values
        return {k: conf[k] / abs(vals[k]) if vals[k] != 0 else math.inf for k in conf}


def confidence_intervals(fit: FitResult, sigma_level: float = 3.0) -> dict:
    """Half widths ``sigma_level * sqrt(C_ii * RSS / (m - p))``.

    ``m`` counts independent samples of the record (zero padding adds bins
    but no information).  Returns NaN everywhere when m <= p.
    """
    if not fit.covariance_defined:
        return {name: math.nan for name in REPORT_NAMES}
    scale = fit.residual_scale
    var = np.clip(np.diag(fit.report_covariance), 0.0, None)
    return {name: float(sigma_level * math.sqrt(v) * scale)
            for name, v in zip(REPORT_NAMES, var)}


def _canonical_theta(free: dict, cov: np.ndarray, names) -> tuple[dict, np.ndarray, bool]:
    if "theta" not in free or free["theta"] <= 0.5 * math.pi:
        return free, cov, False
    free = {**free, "theta": math.pi - free["theta"]}
    j = names.index("theta")
    cov = cov.copy()
    cov[j, :] *= -1.0
    cov[:, j] *= -1.0
    return free, cov, True


def iterative_refit(data: Spectrum, model: str, init: ModelParams,
                    constraints: FitConstraints | None = None, init_z: float = 1.0,
                    max_cycles: int = 20, cycle_tol: float = 1e-6,
                    sigma_level: float = 3.0) -> FitResult:
    """Refit each free parameter in turn, then all jointly, until stable.

    One cycle is a sweep of single-parameter fits in the order d, gamma_z,
    theta, amplitude (then the population rates) followed by a joint fit.
    Cycles repeat until the parameter vector moves by less than
    ``cycle_tol`` (relative) or ``max_cycles`` is reached.
    """
    cons = constraints or FitConstraints()
    pack = _Packing(model, cons, init.as_dict())
    names = pack.names
    if not names:
        raise ValueError("no free parameters left to fit")
    start = init.as_dict()
    if "gamma_split" in names:
        gp = start["gamma_plus"] / max(start["gamma_plus"] + start["gamma_minus"], 1e-300)
        start["gamma_split"] = gp if 0 < gp < 1 else 0.5
    for name in names:
        if name != "theta" and name != "gamma_split" and not start[name] > 0:
            start[name] = 1e-3 * max(start["d"], 1.0)
    u = np.array([pack.to_u(n, start[n]) for n in names])
    order = [names.index(n) for n in _CYCLE_ORDER if n in names]

    def free_values(vec):
        return {n: float(pack.from_u(n, v)) for n, v in zip(names, vec)}

    def residual_full(vec):
        with np.errstate(all="ignore"):
            return spectrum_residual(data, _params(pack.natural(free_values(vec))), model,
                                     init_z)

    history = []
    total_iterations = 0
    joint: LMResult | None = None
    converged_cycles = False
    cycles = 0
    for cycles in range(1, max_cycles + 1):
        previous = u.copy()
        for j in order:
            lower, upper = pack.bounds([names[j]])

            def residual_one(v, j=j):
                trial = u.copy()
                trial[j] = v[0]
                return residual_full(trial)

            single = levenberg_marquardt(residual_one, u[j:j + 1], (lower, upper))
            u[j] = single.x[0]
            total_iterations += single.iterations
        joint = levenberg_marquardt(residual_full, u, pack.bounds(names))
        total_iterations += joint.iterations
        u = joint.x.copy()
        change = np.linalg.norm(u - previous) / max(np.linalg.norm(u), 1e-12)
        history.append({"cycle": cycles, "values": free_values(u),
                        "residual_norm": joint.residual_norm, "change": float(change),
                        "lm_converged": joint.converged})
        if change < cycle_tol:
            converged_cycles = True
            break

    free = free_values(u)
    # chain rule from the optimiser coordinates to natural parameters
    scale = np.array([pack.dx_du(n, free[n]) for n in names])
    cov_u = joint.covariance
    cov = cov_u * np.outer(scale, scale)
    free, cov, folded = _canonical_theta(free, cov, list(names))
    full = pack.natural(free)
    g = pack.derived_jacobian(free)
    report_cov = g @ cov @ g.T

    flags = []
    if "theta" in names:
        flags.append("theta_ambiguous_with_pi_minus_theta")
    if folded:
        flags.append("theta_folded_into_first_quadrant")
    if not converged_cycles:
        flags.append("refit_cycles_not_converged")
    if not joint.converged:
        flags.append("lm_not_converged")

    estimates = _params(full)
    return FitResult(
        model=model,
        estimates=estimates,
        param_names=tuple(names),
        covariance=cov,
        report_covariance=report_cov,
        residual_norm=joint.residual_norm,
        n_residuals=joint.n_residuals,
        n_independent=min(data.n_original, joint.n_residuals),
        iterations=total_iterations,
        cycles=cycles,
        converged=bool(converged_cycles and joint.converged),
        sigma_level=sigma_level,
        history=history,
        flags=flags,
        z_inf=estimates.z_infinity if model == "general" else 0.0,
    )


class AuxFit(NamedTuple):
    gamma_sum: float
    z_inf: float
    gamma_plus: float
    gamma_minus: float

    def as_dict(self) -> dict:
        return dict(self._asdict())


def _weighted_line(t, y, w):
    sw = w.sum()
    tm = (w * t).sum() / sw
    ym = (w * y).sum() / sw
    stt = (w * (t - tm) ** 2).sum()
    slope = (w * (t - tm) * (y - ym)).sum() / stt
    return slope, ym - slope * tm, 1.0 / math.sqrt(stt)


def _smoothed_variance(series: TimeSeries) -> np.ndarray:
    """Variance of z_mean with one pseudo-count per outcome.

    A bin in which every shot agreed has zero sample variance, which would
    give it unlimited weight; (k + 1) / (n + 2) keeps it finite.
    """
    n = np.maximum(series.n_e, 1.0)
    p = (series.up_counts + 1.0) / (n + 2.0)
    return 4.0 * p * (1.0 - p) / n


def fit_aux_decay(z1: TimeSeries, zm1: TimeSeries, tail_fraction: float = 0.1,
                  drift_sigma: float = 3.0) -> AuxFit:
    """Relaxation rates from the two binned branches of the aux experiment.

    z_1 - z_-1 is fitted by a weighted exponential whose rate is
    gamma_plus + gamma_minus (seeded by a straight line through its log),
    the tail of both branches gives z(inf), and
    z(inf) = (g+ - g-)/(g+ + g-) splits the sum.
    """
    if len(z1) != len(zm1) or not np.allclose(z1.times, zm1.times):
        raise ValueError("branches must share the time grid")
    t = z1.times
    ok = (z1.n_e > 0) & (zm1.n_e > 0) & np.isfinite(z1.z_mean) & np.isfinite(zm1.z_mean)
    var1, var2 = _smoothed_variance(z1), _smoothed_variance(zm1)
    diff = z1.z_mean - zm1.z_mean
    sigma_diff = np.sqrt(var1 + var2)
    peak = np.nanmax(np.where(ok, diff, -np.inf))
    use = ok & (diff > 3.0 * sigma_diff) & (diff > 1e-6 * peak)
    if use.sum() < 2:
        raise DegenerateDecayError("branch difference never rises above noise")
    log_diff = np.log(diff[use])
    weights = diff[use] ** 2 / np.maximum(sigma_diff[use] ** 2, 1e-300)
    slope, intercept, _ = _weighted_line(t[use], log_diff, weights)

    # the log-linear fit seeds a direct exponential fit over every usable
    # bin; the log fit alone is biased by dropping bins lost in the noise
    t_ok, diff_ok, sigma_ok = t[ok], diff[ok], np.maximum(sigma_diff[ok], 1e-300)

    def residual(x):
        return (diff_ok - x[0] * np.exp(-x[1] * t_ok)) / sigma_ok

    refined = levenberg_marquardt(residual, [math.exp(intercept), -slope])
    gamma_sum = float(refined.x[1])
    chi2 = refined.residual_norm**2 / max(len(t_ok) - 2, 1)
    slope_err = math.sqrt(max(chi2, 1.0) * max(refined.covariance[1, 1], 0.0))
    if not gamma_sum > 3.0 * slope_err:
        raise DegenerateDecayError(
            f"decay rate {gamma_sum:.3g} not significant (sigma {slope_err:.3g})"
        )

    n = len(t)
    tail = np.arange(n - max(2, int(round(tail_fraction * n))), n)
    tail = tail[ok[tail]]
    if len(tail) < 2:
        raise TailNotSettledError("no usable samples in the tail")
    first, second = np.array_split(tail, 2)

    def branch_mean(idx):
        w1, w2 = z1.n_e[idx], zm1.n_e[idx]
        total = w1.sum() + w2.sum()
        mean = ((w1 * z1.z_mean[idx]).sum() + (w2 * zm1.z_mean[idx]).sum()) / total
        var = ((w1**2 * var1[idx]).sum() + (w2**2 * var2[idx]).sum()) / total**2
        return mean, var

    m_a, v_a = branch_mean(first)
    m_b, v_b = branch_mean(second)
    if abs(m_a - m_b) > drift_sigma * math.sqrt(v_a + v_b):
        raise TailNotSettledError(
            f"tail drifts by {m_b - m_a:.3g} (> {drift_sigma:g} sigma)"
        )
    up = (z1.n_e[tail] * z1.z_mean[tail]).sum() / z1.n_e[tail].sum()
    down = (zm1.n_e[tail] * zm1.z_mean[tail]).sum() / zm1.n_e[tail].sum()
    v_up = (z1.n_e[tail] ** 2 * var1[tail]).sum() / z1.n_e[tail].sum() ** 2
    v_down = (zm1.n_e[tail] ** 2 * var2[tail]).sum() / zm1.n_e[tail].sum() ** 2
    if abs(up - down) > drift_sigma * math.sqrt(v_up + v_down):
        raise TailNotSettledError(f"branches disagree at the tail ({up:.3g} vs {down:.3g})")

    z_inf, _ = branch_mean(tail)
    z_inf = float(np.clip(z_inf, -1.0, 1.0))
    gamma_plus = 0.5 * gamma_sum * (1.0 + z_inf)
    gamma_minus = 0.5 * gamma_sum * (1.0 - z_inf)
    return AuxFit(float(gamma_sum), z_inf, float(gamma_plus), float(gamma_minus))
