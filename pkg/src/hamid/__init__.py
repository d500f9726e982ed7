"""Identification of a driven two-level system from strong-measurement records."""

from .bloch import (
    AffineGenerator,
    BlochVector,
    DecoherenceRates,
    DegenerateSteadyStateError,
    HamiltonianParams,
    build_generator,
    closed_evolution_z,
    decay_difference,
    propagate,
    steady_state,
)
from .fit import (
    AuxFit,
    DegenerateDecayError,
    FitConstraints,
    FitResult,
    TailNotSettledError,
    confidence_intervals,
    fit_aux_decay,
    iterative_refit,
)
from .lm import LMResult, levenberg_marquardt
from .measurement import ExperimentConfig, TimeSeries, sample_aux_experiment, sample_experiment
from .models import (
    ModelEvaluationError,
    ModelParams,
    model_delta,
    model_dephasing,
    model_general,
    record_spectrum,
)
from .pipeline import characterize, scaling_study
from .spectrum import (
    EtaEstimateWarning,
    NoPeakError,
    Spectrum,
    dft,
    estimate_eta,
    find_peak,
    noise_floor,
    spectrum_sum,
)

__version__ = "0.1.0"
