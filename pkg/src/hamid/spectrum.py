"""Normalised discrete Fourier analysis of measured z records.

The transform uses the kernel ``exp(+2 pi i k n / N) / N`` so that the sum
over all frequency bins returns the first sample of the (shifted, padded)
record exactly.  Bin ``n`` sits at angular frequency ``2 pi n / (N dt)``;
bins above ``N / 2`` are the negative frequencies.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .measurement import TimeSeries

__all__ = [
    "Spectrum",
    "NoPeakError",
    "EtaEstimateWarning",
    "DIRECT_DFT_LIMIT",
    "dft",
    "spectrum_sum",
    "estimate_eta",
    "find_peak",
    "noise_floor",
    "next_pow2",
]

#: transforms shorter than this use the direct O(N^2) sum
DIRECT_DFT_LIMIT = 4096


class NoPeakError(RuntimeError):
    """No spectral peak stands out of the noise floor."""


class EtaEstimateWarning(UserWarning):
    """The spectrum sum implies a negative error probability."""


@dataclass
class Spectrum:
    omega: np.ndarray
    values: np.ndarray
    n_original: int
    dt: float
    shift: float = 0.0

    def __len__(self) -> int:
        return len(self.values)

    @property
    def n_padded(self) -> int:
        return len(self.values)

    @property
    def bin_width(self) -> float:
        return 2.0 * math.pi / (self.n_padded * self.dt)

    @property
    def nyquist_bin(self) -> int:
        return self.n_padded // 2

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def _direct_dft(z: np.ndarray) -> np.ndarray:
    n = len(z)
    roots = np.exp(2j * np.pi * np.arange(n) / n)
    k = np.arange(n)
    out = np.empty(n, dtype=complex)
    rows = max(1, 2**22 // n)
    for start in range(0, n, rows):
        idx = np.arange(start, min(n, start + rows))
        phase = np.outer(idx, k) % n
        out[idx] = roots[phase] @ z
    return out / n


def dft(series, pad_to: int | None = None, shift: float = 0.0,
        dt: float | None = None, method: str = "auto") -> Spectrum:
    """Normalised DFT of a record, optionally shifted and zero-padded.

    ``series`` is a :class:`TimeSeries` or a plain array (then ``dt`` is
    required).  ``shift`` is subtracted before padding, so padding appends
    zeros to ``z - shift``.
    """
    if isinstance(series, TimeSeries):
        z = series.z_mean
        dt = series.dt if dt is None else dt
    else:
        z = np.asarray(series, dtype=float)
        if dt is None:
            raise ValueError("dt is required for a bare array")
    if z.ndim != 1 or len(z) < 2:
        raise ValueError("dft needs a one-dimensional record of length >= 2")
    n_orig = len(z)
    n = n_orig if pad_to is None else int(pad_to)
    if n < n_orig:
        raise ValueError(f"pad_to={n} is shorter than the record ({n_orig})")
    padded = np.zeros(n)
    padded[:n_orig] = z - shift

    if method == "auto":
        method = "direct" if n < DIRECT_DFT_LIMIT else "fft"
    if method == "direct":
        values = _direct_dft(padded)
    elif method == "fft":
        # numpy's inverse FFT carries exactly the +i kernel and 1/N factor
        values = np.fft.ifft(padded)
    else:
        raise ValueError("method must be 'auto', 'direct' or 'fft'")
    omega = 2.0 * np.pi * np.arange(n) / (n * dt)
    return Spectrum(omega, values, n_orig, float(dt), float(shift))


def spectrum_sum(sp: Spectrum) -> float:
    """Sum over all bins; equals the first sample of the transformed record."""
    return float(np.sum(sp.values).real)


def estimate_eta(sp: Spectrum, z_inf: float | None = None, noise_sigma: float = 0.0,
                 init_z: int = 1) -> float:
    """Initialisation/measurement error from the spectrum sum rule.

    ``z_inf`` defaults to the shift the spectrum was built with.  A raw
    estimate below ``-3 * noise_sigma`` raises :class:`EtaEstimateWarning`
    (a sign of model mismatch) before clamping into ``[0, 0.5)``.
    """
    if z_inf is None:
        z_inf = sp.shift
    z0 = init_z * (spectrum_sum(sp) + z_inf)
    raw = 0.5 * (1.0 - z0)
    if raw < -3.0 * noise_sigma - 1e-12:
        warnings.warn(
            f"spectrum sum gives eta = {raw:.4g} < 0 beyond noise", EtaEstimateWarning,
            stacklevel=2,
        )
    return float(min(max(raw, 0.0), np.nextafter(0.5, 0.0)))


def _window_mask(n: int, windows, mirror: bool) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    for lo, hi in windows:
        lo, hi = max(0, int(lo)), min(n, int(hi))
        if hi > lo:
            mask[lo:hi] = True
    if mirror:
        idx = np.nonzero(mask)[0]
        mask[(n - idx) % n] = True
    return mask


def noise_floor(sp: Spectrum, signal_windows, mirror: bool = True) -> tuple[float, float]:
    """Mean and standard deviation of |value| outside the signal windows.

    Windows are half-open bin ranges ``(lo, hi)``; with ``mirror`` the
    matching negative-frequency bins are excluded too.
    """
    n = sp.n_padded
    mask = _window_mask(n, signal_windows, mirror)
    if mask.sum() >= 0.5 * n:
        raise ValueError("signal windows must cover less than half of the bins")
    floor = np.abs(sp.values[~mask])
    return float(floor.mean()), float(floor.std())


def _half_width_bins(mag: np.ndarray, peak: int, lo: int, hi: int) -> float:
    """Half width at half maximum of |value| around ``peak``, in bins."""
    half = 0.5 * mag[peak]
    widths = []
    for step, bound in ((-1, lo), (1, hi)):
        j = peak
        while lo <= j + step <= hi and mag[j + step] > half:
            j += step
        if not lo <= j + step <= hi:
            widths.append(abs(j - peak) + 0.5)
            continue
        a, b = mag[j], mag[j + step]
        frac = (a - half) / (a - b) if a != b else 0.5
        widths.append(abs(j - peak) + frac)
    return float(min(widths))


def _prominences(mag: np.ndarray, peaks: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """Height of each peak above the higher of its two bases within [lo, hi]."""
    out = np.empty(len(peaks))
    for i, k in enumerate(peaks):
        left = mag[lo:k]
        higher = np.nonzero(left > mag[k])[0]
        start = lo + (higher[-1] + 1 if len(higher) else 0)
        right = mag[k + 1:hi + 1]
        higher = np.nonzero(right > mag[k])[0]
        stop = k + 1 + (higher[0] if len(higher) else len(right))
        left_base = mag[start:k + 1].min()
        right_base = mag[k:stop].min()
        out[i] = mag[k] - max(left_base, right_base)
    return out


def find_peak(sp: Spectrum, exclude_dc_bins: int = 1, threshold_sigma: float = 5.0,
              return_details: bool = False, min_prominence: float | None = None):
    """Strongest positive-frequency local maximum outside the DC window.

    The bin position is refined by a parabola through the log magnitudes
    of the peak and its two neighbours.  Returns ``(omega_peak, height)``;
    with ``return_details`` a dict with the bin index and half width is
    appended.

    ``min_prominence`` restricts the search to maxima standing at least
    that many noise levels above their surroundings (the noise level being
    the rms magnitude of the upper half of the band).  This keeps noise
    ripples on a broad DC lobe from outranking a broad resonance.  When no
    maximum qualifies the plain strongest one is used.
    """
    if exclude_dc_bins < 1:
        raise ValueError("exclude_dc_bins must be >= 1")
    mag = sp.magnitude
    hi = sp.nyquist_bin
    lo = int(exclude_dc_bins)
    if hi - lo < 2:
        raise NoPeakError("spectrum too short for a peak search")
    inner = np.arange(max(lo, 1), hi)
    is_max = (mag[inner] >= mag[inner - 1]) & (mag[inner] >= mag[inner + 1])
    candidates = inner[is_max]
    if len(candidates) == 0:
        raise NoPeakError("no local maximum above the DC window")
    if min_prominence is not None:
        band = mag[hi // 2: hi + 1]
        noise = float(np.sqrt(np.mean(band**2)))
        prominent = candidates[_prominences(mag, candidates, lo, hi) >= min_prominence * noise]
        if len(prominent):
            candidates = prominent
    k = int(candidates[np.argmax(mag[candidates])])

    hwhm = _half_width_bins(mag, k, lo, hi)
    half_window = int(max(3, math.ceil(5.0 * hwhm)))
    mean, sigma = noise_floor(sp, [(0, lo), (k - half_window, k + half_window + 1)])
    if mag[k] <= mean + threshold_sigma * sigma:
        raise NoPeakError(
            f"peak |F|={mag[k]:.3g} does not exceed floor {mean:.3g} + "
            f"{threshold_sigma:g} x {sigma:.3g}"
        )

    offset = 0.0
    left, centre, right = mag[k - 1], mag[k], mag[k + 1]
    if min(left, right) > 1e-8 * centre:
        la, lb, lc = np.log(left), np.log(centre), np.log(right)
        curvature = la - 2.0 * lb + lc
        if curvature < 0:
            offset = float(np.clip(0.5 * (la - lc) / curvature, -0.5, 0.5))
    omega_peak = (k + offset) * sp.bin_width
    height = float(centre)
    if return_details:
        return omega_peak, height, {"bin": k, "hwhm_bins": hwhm, "floor": (mean, sigma)}
    return omega_peak, height
