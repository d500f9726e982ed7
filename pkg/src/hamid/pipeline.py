"""End-to-end characterisation of a measured record and scaling studies."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bloch import DecoherenceRates, HamiltonianParams
from .fit import FitConstraints, FitResult, iterative_refit
from .measurement import ExperimentConfig, TimeSeries, sample_experiment
from .models import MODELS, ModelParams
from .spectrum import EtaEstimateWarning, Spectrum, dft, estimate_eta, find_peak, next_pow2

__all__ = [
    "PaddingWarning",
    "Characterization",
    "MISMATCH_FACTOR",
    "series_shift",
    "tail_settled",
    "initial_estimates",
    "predicted_residual_norm",
    "characterize",
    "ReplicateOutcome",
    "run_replicate",
    "loglog_slope",
    "scaling_study",
]

MISMATCH_FACTOR = 5.0
TAIL_FRACTION = 0.1
#: a fitted d further than this (relative) from the spectral peak is rejected
PEAK_TOLERANCE = 0.5
#: a free rate below this fraction of d counts as collapsed onto its bound
COLLAPSE_FRACTION = 1e-6
#: a seeding peak must rise this many noise levels above its surroundings
SEED_PROMINENCE = 3.0
#: gamma_plus shares of the population-rate sum tried after a collapse
RESTART_SPLITS = (0.1, 0.3, 0.5, 0.7, 0.9)
RESTART_SCREEN_CYCLES = 2
#: fits whose residual is this small relative to the data need no restart
EXACT_FIT_FRACTION = 1e-6


class PaddingWarning(UserWarning):
    """Zero padding was skipped because the record had not settled."""


@dataclass
class Characterization:
    fit: FitResult
    spectrum: Spectrum
    eta: float
    padded: bool
    shift: float
    predicted_residual: float
    mismatch: bool
    initial: ModelParams
    warnings: list = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return 0 if self.fit.converged and not self.mismatch else 2


def _tail(series: TimeSeries):
    n = len(series)
    idx = np.arange(n - max(2, int(round(TAIL_FRACTION * n))), n)
    return idx[series.n_e[idx] > 0]


def series_shift(series: TimeSeries, model: str) -> float:
    """Constant removed before the transform: the tail mean for the general model."""
    if model != "general":
        return 0.0
    idx = _tail(series)
    w = series.n_e[idx]
    return float((w * series.z_mean[idx]).sum() / w.sum())


def tail_settled(series: TimeSeries, shift: float, model: str, n_sigma: float = 3.0) -> bool:
    """Whether the last 10% of the record sits at its asymptote.

    For a known asymptote (dephasing and delta models: zero) the tail mean
    must lie within ``n_sigma`` projection-noise standard errors of it.  For
    the general model, whose asymptote is estimated from the same tail, the
    two halves of the tail must agree instead.
    """
    idx = _tail(series)
    var = series.projection_variance()
    if model != "general":
        sigma = math.sqrt(var[idx].sum()) / len(idx)
        return abs(series.z_mean[idx].mean() - shift) <= n_sigma * sigma
    first, second = np.array_split(idx, 2)
    diff = series.z_mean[second].mean() - series.z_mean[first].mean()
    sigma = math.sqrt(var[first].sum() / len(first) ** 2 + var[second].sum() / len(second) ** 2)
    return abs(diff) <= n_sigma * sigma


def _peak_areas(sp: Spectrum, d0: float) -> tuple[float, float]:
    omega = sp.omega.copy()
    upper = omega > math.pi / sp.dt
    omega[upper] -= 2.0 * math.pi / sp.dt
    central = np.abs(omega) < 0.5 * d0
    side = omega >= 0.5 * d0
    return float(sp.values[central].real.sum()), float(sp.values[side].real.sum())


def initial_estimates(sp: Spectrum, model: str, init_z: float = 1.0,
                      constraints: FitConstraints | None = None) -> ModelParams:
    """Starting point for the fit from the peak position, areas and width."""
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}")
    cons = constraints or FitConstraints()
    # one bin of the unpadded grid around DC is excluded from the search
    exclude = max(1, sp.n_padded // sp.n_original)
    d0, _, details = find_peak(sp, exclude_dc_bins=exclude, return_details=True,
                               min_prominence=SEED_PROMINENCE)
    d0 = cons.fixed.get("d", d0)

    a0, ap = _peak_areas(sp, d0)
    total = a0 + 2.0 * ap
    cos2 = a0 / total if total > 0 else 0.5
    cos2 = min(max(cos2, 0.02), 0.98)
    theta0 = cons.fixed.get("theta", math.acos(math.sqrt(cos2)))

    amplitude0 = (float(np.sum(sp.values).real) + sp.shift) * init_z
    if not amplitude0 > 0.05:
        amplitude0 = 1.0
    amplitude0 = cons.fixed.get("amplitude", amplitude0)

    gamma_z0 = 0.0
    gp0 = gm0 = 0.0
    if model != "delta":
        record_time = sp.n_original * sp.dt
        decay = details["hwhm_bins"] * sp.bin_width / math.sqrt(3.0) - 1.0 / record_time
        decay = max(decay, 1e-3 * d0, 0.2 / record_time)
        c2 = math.cos(theta0) ** 2
        if model == "dephasing":
            gamma_z0 = decay / (1.0 + c2)
        else:
            # oscillating modes decay at G_z (1 + c^2) + S ((1 + c^2) / 4 + s^2 / 2)
            # with S = G_+ + G_-; attribute half of the width to each channel
            gamma_z0 = 0.5 * decay / (1.0 + c2)
            sum0 = 0.5 * decay / (0.25 * (1.0 + c2) + 0.5 * (1.0 - c2))
        gamma_z0 = cons.fixed.get("gamma_z", gamma_z0)
    if model == "general":
        pinned = cons.pinned_rates()
        if pinned is not None:
            gp0, gm0 = pinned
        else:
            z_inf = sp.shift / max(amplitude0, 1e-12)
            total_rate = cons.sum_gamma if cons.sum_gamma is not None else sum0
            # invert z_inf = (G_+ - G_-) / (S + d s K) for the rate difference,
            # K being the coherent steady-state factor at the seeded width
            s = math.sin(theta0)
            width = 4.0 * gamma_z0 + total_rate
            k = 2.0 * d0 * s * width / (4.0 * d0 * d0 * c2 + width * width)
            diff = z_inf * (total_rate + d0 * s * k)
            diff = min(max(diff, -0.9 * total_rate), 0.9 * total_rate)
            gp0 = 0.5 * (total_rate + diff)
            gm0 = 0.5 * (total_rate - diff)
            if cons.ratio_gamma is not None:
                gm0 = cons.ratio_gamma * gp0
        gp0 = cons.fixed.get("gamma_plus", gp0)
        gm0 = cons.fixed.get("gamma_minus", gm0)
    return ModelParams.from_values(d0, theta0, gamma_z0, gp0, gm0, amplitude0)


def _collapsed(fit: FitResult) -> bool:
    values = fit.values
    floor = COLLAPSE_FRACTION * values["d"]
    return any(values[n] < floor for n in ("gamma_z", "gamma_plus", "gamma_minus")
               if n in fit.param_names)


def _restart_splits(sp: Spectrum, start: ModelParams, best: FitResult,
                    constraints: FitConstraints | None, init_z: float,
                    sigma_level: float) -> FitResult:
    """Refit from several population-rate splits after a rate collapsed.

    Driving a log-parameterised rate to zero is a common trap when the
    seeded split is far off.  Each split is screened with a short refit and
    the best one is refined; it replaces the original only if it does better.
    """
    rates = start.rates
    total = rates.gamma_plus + rates.gamma_minus
    screened = None
    for share in RESTART_SPLITS:
        trial = start.replace(gamma_plus=share * total, gamma_minus=(1.0 - share) * total)
        fit = iterative_refit(sp, "general", trial, constraints, init_z=init_z,
                              max_cycles=RESTART_SCREEN_CYCLES, sigma_level=sigma_level)
        if screened is None or fit.residual_norm < screened.residual_norm:
            screened = fit
    if screened.residual_norm < best.residual_norm:
        refined = iterative_refit(sp, "general", screened.estimates, constraints,
                                  init_z=init_z, sigma_level=sigma_level)
        if (refined.converged, -refined.residual_norm) > (best.converged, -best.residual_norm):
            best = refined
    best.flags.append("restarted_after_rate_collapse")
    return best


def predicted_residual_norm(series: TimeSeries, n_padded: int, n_free: int) -> float:
    """Expected residual norm from projection noise alone.

    Each transformed bin carries ``sum_k var_k / N**2`` of noise power; the
    one-sided real/imaginary residual vector holds half of it, and the fit
    absorbs ``n_free`` of the ``n_t`` independent directions.
    """
    var = series.projection_variance()
    n_t = len(series)
    total = var.sum() / (2.0 * n_padded) * max(n_t - n_free, 1) / n_t
    return math.sqrt(total)


def characterize(series: TimeSeries, model: str = "dephasing",
                 constraints: FitConstraints | None = None, init_z: float = 1.0,
                 pad: bool = True, sigma_level: float = 3.0,
                 init: ModelParams | None = None) -> Characterization:
    """Shift, transform, seed and fit one record; estimate eta; flag mismatch."""
    notes = []
    shift = series_shift(series, model)
    padded = False
    pad_to = None
    if pad:
        if tail_settled(series, shift, model):
            pad_to = 2 * next_pow2(len(series))
            padded = True
        else:
            message = "record tail has not settled; zero padding disabled"
            warnings.warn(message, PaddingWarning, stacklevel=2)
            notes.append(message)
    sp = dft(series, pad_to=pad_to, shift=shift)

    start = init if init is not None else initial_estimates(sp, model, init_z, constraints)
    fit = iterative_refit(sp, model, start, constraints, init_z=init_z,
                          sigma_level=sigma_level)
    data_norm = float(np.linalg.norm(sp.values[: sp.n_padded // 2 + 1]))
    if (init is None and model == "general" and _collapsed(fit)
            and fit.residual_norm > EXACT_FIT_FRACTION * data_norm):
        fit = _restart_splits(sp, start, fit, constraints, init_z, sigma_level)

    if init is None and model != "delta":
        peak = start.h.d
        if not abs(fit.estimates.h.d - peak) <= PEAK_TOLERANCE * peak:
            fit.flags.append("d_left_spectral_peak")
            fit.converged = False

    var0 = series.projection_variance()[0]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EtaEstimateWarning)
        eta = estimate_eta(sp, shift, noise_sigma=0.5 * math.sqrt(var0), init_z=int(init_z))
    for w in caught:
        notes.append(str(w.message))
        warnings.warn(w.message, w.category, stacklevel=2)
    fit.eta = eta

    predicted = predicted_residual_norm(series, sp.n_padded, fit.n_free)
    mismatch = fit.residual_norm > MISMATCH_FACTOR * predicted
    if mismatch:
        fit.flags.append("model_mismatch")
    return Characterization(fit, sp, eta, padded, shift, predicted, mismatch, start, notes)


@dataclass
class ReplicateOutcome:
    n_total: int
    seed: int
    converged: bool
    fractional: dict


def run_replicate(args) -> ReplicateOutcome:
    """Simulate and characterise one seed; fractional uncertainties at 1 sigma."""
    h, rates, cfg, model, constraints = args
    series = sample_experiment(h, rates, cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = characterize(series, model, constraints, init_z=cfg.init_z)
    frac = result.fit.fractional_uncertainty(1.0)
    return ReplicateOutcome(cfg.n_total, cfg.seed, result.fit.converged and not result.mismatch,
                            frac)


def loglog_slope(x, y) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(lx, ly, 1)[0])


def scaling_study(h: HamiltonianParams, rates: DecoherenceRates, cfg: ExperimentConfig,
                  n_e_values, seeds, model: str = "dephasing",
                  params=("sigma_z", "gamma_z", "d", "theta"),
                  constraints: FitConstraints | None = None, workers: int = 1) -> dict:
    """Mean fractional uncertainty per parameter as N_e (hence N_T) grows.

    Replicate ``i`` of every N_e cell uses ``seeds[i]``.  Non-converged
    replicates are excluded from the statistics and counted.
    """
    n_e_values = sorted(set(int(n) for n in n_e_values))
    if len(n_e_values) < 3:
        raise ValueError("a scaling study needs at least three distinct n_e values")
    if len(seeds) < 10:
        raise ValueError("a scaling study needs at least ten seeds per n_e")
    jobs = [(h, rates, ExperimentConfig(cfg.dt, cfg.n_t, n_e, cfg.eta, cfg.init_z, int(s)),
             model, constraints) for n_e in n_e_values for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_replicate, jobs))
    else:
        outcomes = [run_replicate(job) for job in jobs]

    rows = []
    excluded = {}
    for n_e in n_e_values:
        n_total = n_e * cfg.n_t
        cell = [o for o in outcomes if o.n_total == n_total]
        good = [o for o in cell if o.converged]
        excluded[n_total] = len(cell) - len(good)
        for name in params:
            vals = np.array([o.fractional[name] for o in good], dtype=float)
            rows.append({
                "n_total": n_total,
                "param": name,
                "frac_uncertainty_mean": float(vals.mean()) if len(vals) else math.nan,
                "frac_uncertainty_sd": float(vals.std(ddof=1)) if len(vals) > 1 else math.nan,
            })
    slopes = {}
    for name in params:
        pts = [(r["n_total"], r["frac_uncertainty_mean"]) for r in rows if r["param"] == name]
        xs, ys = zip(*pts)
        slopes[name] = loglog_slope(xs, ys) if all(np.isfinite(ys)) else math.nan
    return {"rows": rows, "slopes": slopes, "excluded": excluded}
