"""Signal diagnostics shared by the engines: envelopes, spectra, peak counts."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal, stats


@dataclass
class Envelope:
    peak_times: np.ndarray
    peak_values: np.ndarray
    slope: float
    stderr: float
    intercept: float


def envelope(t, x, center: float = 0.0, floor: float = 0.0) -> Envelope:
    """Local maxima of ``|x - center|`` and their linear regression on time.

    Deviations below ``floor`` are treated as zero, so accumulated rounding
    noise on a constant signal does not count as oscillation. With fewer than
    three extrema the slope is reported as 0 with infinite standard error.
    """
    t = np.asarray(t, dtype=float)
    y = np.abs(np.asarray(x, dtype=float) - center)
    if floor > 0:
        y = np.where(y < floor, 0.0, y)
    idx, _ = signal.find_peaks(y)
    if len(idx) < 3:
        return Envelope(t[idx], y[idx], 0.0, np.inf, float(y.mean()) if len(y) else 0.0)
    fit = stats.linregress(t[idx], y[idx])
    return Envelope(t[idx], y[idx], float(fit.slope), float(fit.stderr), float(fit.intercept))


def window_amplitude(t, x, t0: float, t1: float) -> float:
    """Half peak-to-peak of ``x`` on ``[t0, t1]``."""
    t = np.asarray(t)
    sel = (t >= t0 - 1e-12) & (t <= t1 + 1e-12)
    if not np.any(sel):
        raise ValueError("empty window")
    return 0.5 * float(np.ptp(np.asarray(x)[sel]))


def spectral_peak(t, x, pad: int = 8) -> float:
    """Angular frequency of the dominant spectral line of ``x(t)``.

    Mean-removed, Hann-windowed, zero-padded FFT with parabolic refinement
    of the maximum bin.
    """
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    if len(x) < 8:
        raise ValueError("insufficient samples for a spectrum")
    dt = t[1] - t[0]
    y = (x - x.mean()) * np.hanning(len(x))
    n = pad * len(y)
    spec = np.abs(np.fft.rfft(y, n))
    spec[0] = 0.0
    k = int(np.argmax(spec))
    if 0 < k < len(spec) - 1:
        a, b, c = np.log(spec[k - 1:k + 2] + 1e-300)
        denom = a - 2 * b + c
        k = k + (0.5 * (a - c) / denom if denom != 0 else 0.0)
    return 2 * np.pi * k / (n * dt)


def count_peaks(p, rel_prominence: float = 0.1, smooth: float = 0.0) -> int:
    """Number of maxima of a distribution with prominence above a fraction of its max.

    ``smooth`` is the width (in bins) of a Gaussian coarse-graining applied
    first; it removes the period-2 parity fringes of exact cat states. The
    distribution is padded with zeros so peaks at the boundary count.
    """
    p = np.asarray(p, dtype=float)
    if smooth > 0:
        p = ndimage.gaussian_filter1d(p, smooth, mode="constant")
    padded = np.concatenate([[0.0], p, [0.0]])
    idx, _ = signal.find_peaks(padded, prominence=rel_prominence * p.max())
    return len(idx)


def quantile_bands(samples, qs=(0.05, 0.25, 0.5, 0.75, 0.95)) -> dict:
    """Per-time quantiles across trajectories (axis 0); nested by construction."""
    arr = np.asarray(samples, dtype=float)
    return {f"q{int(round(q * 100)):02d}": np.quantile(arr, q, axis=0) for q in qs}
