"""Monte-Carlo simulation of strong projective measurements.

Random streams
--------------
Every draw for time point ``k`` comes from its own counter-based stream::

    Generator(Philox(SeedSequence(seed, spawn_key=(tag, k))))

with ``tag = 0`` for the coherent-oscillation experiment and ``tag = 1``
for the auxiliary relaxation experiment.  Results therefore do not depend
on the order in which time points are evaluated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .bloch import DecoherenceRates, HamiltonianParams, propagate, step_matrix

__all__ = [
    "ExperimentConfig",
    "TimeSeries",
    "point_rng",
    "outcome_probabilities",
    "sample_experiment",
    "sample_aux_experiment",
    "combine_error_rates",
]

MAIN_STREAM = 0
AUX_STREAM = 1
_P_TOL = 1e-12


@dataclass(frozen=True)
class ExperimentConfig:
    dt: float
    n_t: int
    n_e: int
    eta: float = 0.0
    init_z: int = 1
    seed: int = 0
    aux_interval: str = "fixed"

    def __post_init__(self):
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ValueError(f"dt must be finite and > 0, got {self.dt}")
        if int(self.n_t) != self.n_t or self.n_t < 2:
            raise ValueError(f"n_t must be an integer >= 2, got {self.n_t}")
        if int(self.n_e) != self.n_e or self.n_e < 1:
            raise ValueError(f"n_e must be an integer >= 1, got {self.n_e}")
        if not 0.0 <= self.eta < 0.5:
            raise ValueError(f"eta must lie in [0, 0.5), got {self.eta}")
        if self.init_z not in (1, -1):
            raise ValueError(f"init_z must be +1 or -1, got {self.init_z}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.aux_interval not in ("fixed", "growing"):
            raise ValueError("aux_interval must be 'fixed' or 'growing'")

    @property
    def n_total(self) -> int:
        return self.n_t * self.n_e

    @property
    def t_ob(self) -> float:
        return self.n_t * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_t) * self.dt

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed))


@dataclass
class TimeSeries:
    """Ensemble-averaged z record on a uniform time grid.

    ``up_counts`` are floats so that noiseless (expected-value) records can
    share the format; ``n_e`` may vary per point for binned data.
    """

    times: np.ndarray
    z_mean: np.ndarray
    up_counts: np.ndarray
    n_e: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.z_mean = np.asarray(self.z_mean, dtype=float)
        self.up_counts = np.asarray(self.up_counts, dtype=float)
        self.n_e = np.broadcast_to(np.asarray(self.n_e, dtype=float), self.times.shape).copy()
        if not (self.times.shape == self.z_mean.shape == self.up_counts.shape):
            raise ValueError("times, z_mean and up_counts must have equal length")
        if self.times.ndim != 1 or len(self.times) < 2:
            raise ValueError("a time series needs at least two points")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @classmethod
    def from_counts(cls, times, up_counts, n_e) -> "TimeSeries":
        up = np.asarray(up_counts, dtype=float)
        n = np.broadcast_to(np.asarray(n_e, dtype=float), up.shape)
        with np.errstate(invalid="ignore", divide="ignore"):
            z = np.where(n > 0, 2.0 * up / np.where(n > 0, n, 1.0) - 1.0, np.nan)
        return cls(times, z, up, n)

    def projection_variance(self) -> np.ndarray:
        """Binomial variance of each z_mean entry, floored at one shot's worth."""
        n = np.where(self.n_e > 0, self.n_e, np.inf)
        z2 = np.clip(np.nan_to_num(self.z_mean) ** 2, 0.0, 1.0)
        return np.maximum(1.0 - z2, 1.0 / n) / n


def point_rng(seed: int, k: int, tag: int = MAIN_STREAM) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(tag, int(k))))
    )


def combine_error_rates(eta1: float, eta2: float) -> float:
    """Net flip probability of two independent symmetric bit flips."""
    return eta1 * (1.0 - eta2) + eta2 * (1.0 - eta1)


def outcome_probabilities(h: HamiltonianParams, rates: DecoherenceRates,
                          cfg: ExperimentConfig, error_location: str = "post") -> np.ndarray:
    """Probability of a +1 outcome at each time point.

    ``error_location="post"`` flips the read-out result with probability eta;
    ``"pre"`` flips the prepared state before evolution instead.
    """
    init = (0.0, 0.0, float(cfg.init_z))
    z = propagate(h, rates, init, cfg.dt, cfg.n_t)[:, 2]
    if error_location == "post":
        p = 0.5 * (1.0 + (1.0 - 2.0 * cfg.eta) * z)
    elif error_location == "pre":
        z_flipped = propagate(h, rates, (0.0, 0.0, -float(cfg.init_z)), cfg.dt, cfg.n_t)[:, 2]
        p = (1.0 - cfg.eta) * 0.5 * (1.0 + z) + cfg.eta * 0.5 * (1.0 + z_flipped)
    else:
        raise ValueError("error_location must be 'pre' or 'post'")
    return _checked_probability(p)


def _checked_probability(p: np.ndarray) -> np.ndarray:
    if np.any(~np.isfinite(p)) or np.any(p < -_P_TOL) or np.any(p > 1.0 + _P_TOL):
        raise ValueError("outcome probability outside [0, 1]; inconsistent inputs")
    return np.clip(p, 0.0, 1.0)


def sample_experiment(h: HamiltonianParams, rates: DecoherenceRates,
                      cfg: ExperimentConfig, noiseless: bool = False) -> TimeSeries:
    """Simulate the initialise/evolve/measure protocol on every time point.

    With ``noiseless=True`` the record holds expected counts instead of
    binomial draws.
    """
    p = outcome_probabilities(h, rates, cfg)
    if noiseless:
        z = 2.0 * p - 1.0
        return TimeSeries(cfg.times, z, cfg.n_e * p, cfg.n_e)
    counts = np.array(
        [point_rng(cfg.seed, k).binomial(cfg.n_e, p[k]) for k in range(cfg.n_t)],
        dtype=float,
    )
    return TimeSeries.from_counts(cfg.times, counts, cfg.n_e)


def _aux_transition_z(h, rates, tau):
    """z after waiting tau, starting from z = +1 and from z = -1."""
    phi = step_matrix(h, rates, tau)
    z_up = phi[2, 2] + phi[2, 3]
    z_down = -phi[2, 2] + phi[2, 3]
    return z_up, z_down


def sample_aux_experiment(rates: DecoherenceRates, cfg: ExperimentConfig,
                          h: HamiltonianParams | None = None,
                          noiseless: bool = False) -> tuple[TimeSeries, TimeSeries]:
    """Measure-wait-measure relaxation experiment binned by the previous result.

    Returns the (z_1, z_-1) branches.  In ``"fixed"`` interval mode every
    time point k runs two measurement chains with constant wait k*dt, one
    prepared in +1 and one in -1, with ceil(n_e/2) and floor(n_e/2)
    transitions.  The first measurement of each pair only labels the bin.
    In ``"growing"`` mode n_e chains sweep the waits dt*k in order and each
    transition feeds point k; empty bins come back as NaN with n_e = 0.
    """
    if h is None:
        h = HamiltonianParams(0.0, 0.0)
    if not (h.d == 0.0 or h.theta == 0.0):
        raise ValueError("auxiliary experiment needs d = 0 or theta = 0")
    if cfg.n_e < 2:
        raise ValueError("auxiliary experiment needs n_e >= 2")

    taus = cfg.times
    trans = np.array([_aux_transition_z(h, rates, tau) for tau in taus])
    p_up_from_up = _checked_probability(0.5 * (1.0 + trans[:, 0]))
    p_up_from_down = _checked_probability(0.5 * (1.0 + trans[:, 1]))
    eta = cfg.eta

    if noiseless:
        if eta > 0:
            raise ValueError("noiseless auxiliary records are only defined for eta = 0")
        n_up = np.full(cfg.n_t, float(math.ceil(cfg.n_e / 2)))
        n_down = np.full(cfg.n_t, float(cfg.n_e // 2))
        return (TimeSeries(taus, trans[:, 0], n_up * p_up_from_up, n_up),
                TimeSeries(taus, trans[:, 1], n_down * p_up_from_down, n_down))

    # columns [0, n_e) drive transitions, [n_e, 2 n_e) flip the reports
    n_draw = cfg.n_e * (2 if eta > 0 else 1)
    uniforms = np.empty((cfg.n_t, n_draw))
    for k in range(cfg.n_t):
        uniforms[k] = point_rng(cfg.seed, k, AUX_STREAM).random(n_draw)
    u = uniforms[:, :cfg.n_e]
    flips = uniforms[:, cfg.n_e:] < eta if eta > 0 else None

    n_from = {1: np.zeros(cfg.n_t), -1: np.zeros(cfg.n_t)}
    up_from = {1: np.zeros(cfg.n_t), -1: np.zeros(cfg.n_t)}

    if cfg.aux_interval == "fixed":
        n_a = math.ceil(cfg.n_e / 2)
        for start, cols in ((1, range(0, n_a)), (-1, range(n_a, cfg.n_e))):
            state = np.full(cfg.n_t, start)
            label = state.copy()
            for col in cols:
                p_up = np.where(state > 0, p_up_from_up, p_up_from_down)
                new = np.where(u[:, col] < p_up, 1, -1)
                shown = new if flips is None else np.where(flips[:, col], -new, new)
                for b in (1, -1):
                    in_bin = label == b
                    n_from[b] += in_bin
                    up_from[b] += in_bin & (shown > 0)
                state, label = new, shown
    else:
        state = np.where(np.arange(cfg.n_e) < math.ceil(cfg.n_e / 2), 1, -1)
        label = state.copy()
        for k in range(cfg.n_t):
            p_up = np.where(state > 0, p_up_from_up[k], p_up_from_down[k])
            new = np.where(u[k] < p_up, 1, -1)
            shown = new if flips is None else np.where(flips[k], -new, new)
            for b in (1, -1):
                in_bin = label == b
                n_from[b][k] = in_bin.sum()
                up_from[b][k] = (in_bin & (shown > 0)).sum()
            state, label = new, shown

    return (TimeSeries.from_counts(taus, up_from[1], n_from[1]),
            TimeSeries.from_counts(taus, up_from[-1], n_from[-1]))
