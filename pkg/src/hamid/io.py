"""CSV and JSON formats for records, spectra, fits and constraints.

Floats are written with Python's shortest round-trip representation, so
every file parses back to bit-identical values.  Writes go to a temporary
file in the target directory followed by an atomic rename.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .fit import REPORT_NAMES, FitConstraints, FitResult
from .measurement import TimeSeries
from .models import ModelParams
from .spectrum import Spectrum

__all__ = [
    "atomic_write_text",
    "write_series_csv",
    "read_series_csv",
    "write_spectrum_csv",
    "read_spectrum_csv",
    "fit_to_dict",
    "fit_from_dict",
    "write_json",
    "read_json",
    "constraints_from_dict",
]

SERIES_HEADER = ["t", "z_mean", "up_counts", "n_e"]
SPECTRUM_HEADER = ["omega", "re", "im", "abs"]


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _csv_text(header, columns) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in zip(*columns):
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def _read_csv(path, header) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            found = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if [h.strip() for h in found] != header:
            raise ValueError(f"{path}: expected header {','.join(header)}, got {','.join(found)}")
        rows = [[float(v) for v in row] for row in reader if row]
    if any(len(r) != len(header) for r in rows):
        raise ValueError(f"{path}: every row needs {len(header)} fields")
    return np.array(rows, dtype=float).reshape(-1, len(header))


def write_series_csv(path, series: TimeSeries) -> Path:
    return atomic_write_text(path, _csv_text(
        SERIES_HEADER, (series.times, series.z_mean, series.up_counts, series.n_e)))


def read_series_csv(path) -> TimeSeries:
    data = _read_csv(path, SERIES_HEADER)
    if len(data) < 2:
        raise ValueError(f"{path}: a series needs at least two rows")
    return TimeSeries(data[:, 0], data[:, 1], data[:, 2], data[:, 3])


def write_spectrum_csv(path, sp: Spectrum) -> Path:
    return atomic_write_text(path, _csv_text(
        SPECTRUM_HEADER, (sp.omega, sp.values.real, sp.values.imag, np.abs(sp.values))))


def read_spectrum_csv(path, n_original: int | None = None, shift: float = 0.0) -> Spectrum:
    """Parse a spectrum file; ``dt`` is recovered from the frequency spacing."""
    data = _read_csv(path, SPECTRUM_HEADER)
    n = len(data)
    if n < 2:
        raise ValueError(f"{path}: a spectrum needs at least two rows")
    dt = 2.0 * math.pi / (n * data[1, 0])
    values = data[:, 1] + 1j * data[:, 2]
    return Spectrum(data[:, 0], values, n if n_original is None else int(n_original), dt, shift)


def _f(x):
    return None if x is None else float(x)


def fit_to_dict(fit: FitResult) -> dict:
    est = fit.estimates.as_dict()
    est["z_inf"] = _f(fit.z_inf)
    est["eta"] = _f(fit.eta)
    return {
        "estimates": est,
        "confidence": fit.confidence,
        "sigma_level": fit.sigma_level,
        "residual_norm": fit.residual_norm,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "model": fit.model,
        "cycles": fit.cycles,
        "flags": list(fit.flags),
        "param_names": list(fit.param_names),
        "covariance": np.asarray(fit.covariance).tolist(),
        "report_names": list(REPORT_NAMES),
        "report_covariance": np.asarray(fit.report_covariance).tolist(),
        "n_residuals": fit.n_residuals,
        "n_independent": fit.n_independent,
        "history": fit.history,
    }


def fit_from_dict(data: dict) -> FitResult:
    est = data["estimates"]
    params = ModelParams.from_values(est["d"], est["theta"], est["gamma_z"],
                                     est["gamma_plus"], est["gamma_minus"], est["amplitude"])
    return FitResult(
        model=data["model"],
        estimates=params,
        param_names=tuple(data["param_names"]),
        covariance=np.array(data["covariance"], dtype=float),
        report_covariance=np.array(data["report_covariance"], dtype=float),
        residual_norm=float(data["residual_norm"]),
        n_residuals=int(data["n_residuals"]),
        n_independent=int(data["n_independent"]),
        iterations=int(data["iterations"]),
        cycles=int(data["cycles"]),
        converged=bool(data["converged"]),
        sigma_level=float(data["sigma_level"]),
        history=list(data.get("history", [])),
        flags=list(data.get("flags", [])),
        eta=est.get("eta"),
        z_inf=est.get("z_inf"),
    )


def write_json(path, data) -> Path:
    return atomic_write_text(path, json.dumps(data, indent=2) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def constraints_from_dict(data: dict) -> FitConstraints:
    """Accept either aux-experiment output or an explicit constraint set.

    Aux output (``gamma_plus``/``gamma_minus`` at top level) pins both
    population rates; otherwise ``fixed``, ``ratio_gamma`` and ``sum_gamma``
    are read directly.
    """
    if "fixed" in data or "ratio_gamma" in data or "sum_gamma" in data:
        return FitConstraints(
            fixed={k: float(v) for k, v in data.get("fixed", {}).items()},
            ratio_gamma=_f(data.get("ratio_gamma")),
            sum_gamma=_f(data.get("sum_gamma")),
        )
    if "gamma_plus" in data and "gamma_minus" in data:
        return FitConstraints.from_aux(data)
    raise ValueError("constraints need fixed/ratio_gamma/sum_gamma or gamma_plus/gamma_minus")
