"""Frequency-domain features: Welch PSD, the five EEG bands, Simpson-rule
band power, differential entropy, and the 20-dim per-segment feature vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sp_signal

from .data import EegSegment, N_CHANNELS
from .util import flag


@dataclass(frozen=True)
class FrequencyBand:
    name: str
    lo_hz: float
    hi_hz: float


BANDS: tuple[FrequencyBand, ...] = (
    FrequencyBand("Delta", 1.0, 4.0),
    FrequencyBand("Theta", 4.0, 8.0),
    FrequencyBand("Alpha", 8.0, 12.0),
    FrequencyBand("Beta", 12.0, 31.0),
    FrequencyBand("Gamma", 31.0, 75.0),
)
BAND_BY_NAME = {b.name: b for b in BANDS}
N_BANDS = len(BANDS)

DEFAULT_WELCH_WINDOW_S = 2.0  # 0.5 Hz resolution at any fs
POWER_FLOOR = 1e-12


@dataclass(frozen=True)
class PsdEstimate:
    """One-sided PSD of a single channel on a uniform frequency grid."""

    freqs: np.ndarray  # Hz, increasing from 0
    power: np.ndarray  # uV^2/Hz

    def __post_init__(self) -> None:
        freqs = np.asarray(self.freqs, dtype=np.float64)
        power = np.asarray(self.power, dtype=np.float64)
        if freqs.shape != power.shape or freqs.ndim != 1:
            raise ValueError("freqs and power must be matching 1-D arrays")
        if np.any(np.diff(freqs) <= 0):
            raise ValueError("frequency grid must be strictly increasing")
        if np.any(power < 0) or not np.all(np.isfinite(power)):
            raise ValueError("PSD must be finite and non-negative")
        object.__setattr__(self, "freqs", freqs)
        object.__setattr__(self, "power", power)


def welch_psd(
    channel_samples,
    fs: float,
    win_s: float = DEFAULT_WELCH_WINDOW_S,
    overlap: float = 0.5,
) -> PsdEstimate:
    """Hann-windowed averaged periodogram, density-scaled (integral ~ variance)."""
    x = np.asarray(channel_samples, dtype=np.float64)
    nperseg = int(round(win_s * fs))
    if x.size < nperseg:
        raise ValueError(f"signal of {x.size} samples shorter than window {nperseg}")
    freqs, power = sp_signal.welch(
        x,
        fs=fs,
        window="hann",
        nperseg=nperseg,
        noverlap=int(nperseg * overlap),
        scaling="density",
    )
    # Tiny negative values never occur with Welch, but guard the invariant.
    return PsdEstimate(freqs=freqs, power=np.maximum(power, 0.0))


def _composite_simpson(y: np.ndarray, dx: float) -> float:
    """Composite Simpson; an odd interval count gets a trapezoid tail."""
    n = y.size - 1
    if n < 1:
        return 0.0
    m = n if n % 2 == 0 else n - 1
    total = 0.0
    if m >= 2:
        head = y[: m + 1]
        total += (dx / 3.0) * (
            head[0] + head[-1] + 4.0 * float(np.sum(head[1:-1:2])) + 2.0 * float(np.sum(head[2:-1:2]))
        )
    if m != n:
        total += dx * (y[-2] + y[-1]) / 2.0
    return total


def band_power_simpson(psd: PsdEstimate, band: FrequencyBand) -> float:
    """Integrate the PSD over [lo, hi] with the composite Simpson rule.

    Grid points with lo <= f <= hi participate, so adjacent bands share their
    edge point and the per-band integrals sum to the full-range integral.
    Fewer than 3 points falls back to the trapezoid rule.
    """
    f = psd.freqs
    tol = 1e-9 * max(1.0, band.hi_hz)
    mask = (f >= band.lo_hz - tol) & (f <= band.hi_hz + tol)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError(f"no PSD grid points inside {band.name} [{band.lo_hz}, {band.hi_hz}] Hz")
    y = psd.power[idx]
    dx = float(f[1] - f[0])
    if idx.size < 3:
        flag(f"band_power_simpson: <3 points in {band.name}, using trapezoid")
        return float(np.trapezoid(y, dx=dx)) if idx.size > 1 else 0.0
    return _composite_simpson(y, dx)


def _band_mask(freqs: np.ndarray, band: FrequencyBand) -> np.ndarray:
    # Membership is closed-left / open-right; the top band closes at its edge.
    if band.hi_hz >= BANDS[-1].hi_hz:
        return (freqs >= band.lo_hz) & (freqs <= band.hi_hz)
    return (freqs >= band.lo_hz) & (freqs < band.hi_hz)


def de_from_band_power(p_band: float) -> float:
    """Gaussian-assumption differential entropy of a band power, in nats."""
    if p_band < POWER_FLOOR:
        flag("differential entropy: band power clamped at floor")
        p_band = POWER_FLOOR
    return 0.5 * float(np.log(2.0 * np.pi * np.e * p_band))


def differential_entropy(channel_samples, fs: float, band: FrequencyBand) -> float:
    """DE of one band from the FFT periodogram's band-average power."""
    x = np.asarray(channel_samples, dtype=np.float64)
    n = x.size
    if n < 2:
        raise ValueError("differential entropy needs at least 2 samples")
    spectrum = np.fft.rfft(x)
    power = (np.abs(spectrum) ** 2) / (fs * n)
    power[1:] *= 2.0
    if n % 2 == 0:
        power[-1] /= 2.0
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    mask = _band_mask(freqs, band)
    if not np.any(mask):
        raise ValueError(f"no FFT bins inside {band.name}")
    return de_from_band_power(float(np.mean(power[mask])))


def band_power_matrix(
    segment: EegSegment, win_s: float = DEFAULT_WELCH_WINDOW_S
) -> np.ndarray:
    """(4 channels x 5 bands) Simpson band powers of one segment."""
    out = np.empty((N_CHANNELS, N_BANDS))
    for c in range(N_CHANNELS):
        psd = welch_psd(segment.data[c], segment.sample_rate, win_s=win_s)
        for b, band in enumerate(BANDS):
            out[c, b] = band_power_simpson(psd, band)
    return out


def de_matrix(segment: EegSegment) -> np.ndarray:
    """(4 channels x 5 bands) differential entropies of one segment."""
    out = np.empty((N_CHANNELS, N_BANDS))
    for c in range(N_CHANNELS):
        for b, band in enumerate(BANDS):
            out[c, b] = differential_entropy(segment.data[c], segment.sample_rate, band)
    return out


def psd_feature_vector(segment: EegSegment, win_s: float = DEFAULT_WELCH_WINDOW_S) -> np.ndarray:
    """20-dim absolute band powers, channel-major, before any normalisation."""
    return band_power_matrix(segment, win_s=win_s).reshape(-1)


def de_feature_vector(segment: EegSegment) -> np.ndarray:
    """20-dim differential entropy features, channel-major."""
    return de_matrix(segment).reshape(-1)
