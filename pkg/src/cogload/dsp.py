"""Time-domain preprocessing: Butterworth bandpass, mains notch, z-scoring,
and test-time Gaussian noise injection.

Filters are designed as biquad cascades and applied as a single causal
forward pass with zero initial state (a zero-phase forward-backward variant
is available behind a flag).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal as sp_signal

from .data import EegSegment
from .util import flag

VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class Biquad:
    """One second-order section, normalised so a0 = 1."""

    b0: float
    b1: float
    b2: float
    a1: float
    a2: float

    def poles(self) -> np.ndarray:
        return np.roots([1.0, self.a1, self.a2])


@dataclass(frozen=True)
class BiquadCascade:
    sections: tuple[Biquad, ...]
    sample_rate: float

    def __post_init__(self) -> None:
        if not self.sections:
            raise ValueError("cascade needs at least one section")
        for s in self.sections:
            coeffs = (s.b0, s.b1, s.b2, s.a1, s.a2)
            if not all(np.isfinite(coeffs)):
                raise ValueError(f"non-finite coefficients in {s}")
            if np.any(np.abs(s.poles()) >= 1.0):
                raise ValueError(f"unstable section (pole on/outside unit circle): {s}")

    def as_sos(self) -> np.ndarray:
        return np.asarray(
            [[s.b0, s.b1, s.b2, 1.0, s.a1, s.a2] for s in self.sections], dtype=np.float64
        )


def _cascade_from_sos(sos: np.ndarray, fs: float) -> BiquadCascade:
    sections = []
    for row in np.atleast_2d(sos):
        b0, b1, b2, a0, a1, a2 = (float(v) for v in row)
        sections.append(Biquad(b0 / a0, b1 / a0, b2 / a0, a1 / a0, a2 / a0))
    return BiquadCascade(sections=tuple(sections), sample_rate=fs)


def design_bandpass(low_hz: float = 1.0, high_hz: float = 75.0, fs: float = 256.0) -> BiquadCascade:
    """Order-2 Butterworth bandpass (two biquads) with the given passband."""
    if not 0.0 < low_hz < high_hz < fs / 2.0:
        raise ValueError(f"need 0 < low < high < fs/2, got ({low_hz}, {high_hz}) at fs={fs}")
    sos = sp_signal.butter(2, [low_hz, high_hz], btype="bandpass", fs=fs, output="sos")
    return _cascade_from_sos(sos, fs)


def design_notch(f0_hz: float = 60.0, q: float = 30.0, fs: float = 256.0) -> BiquadCascade:
    """Second-order notch at f0 with the given quality factor."""
    if not 0.0 < f0_hz < fs / 2.0:
        raise ValueError(f"notch frequency must be in (0, fs/2), got {f0_hz} at fs={fs}")
    if q <= 0:
        raise ValueError(f"quality factor must be positive, got {q}")
    b, a = sp_signal.iirnotch(f0_hz, q, fs=fs)
    sos = sp_signal.tf2sos(b, a)
    return _cascade_from_sos(sos, fs)


def frequency_response(cascade: BiquadCascade, f_hz) -> np.ndarray:
    """Evaluate the cascade transfer function at z = exp(j 2 pi f / fs).

    Direct per-section polynomial evaluation; used as the analytic oracle for
    the time-domain filtering path.
    """
    f = np.atleast_1d(np.asarray(f_hz, dtype=np.float64))
    z1 = np.exp(-2j * np.pi * f / cascade.sample_rate)  # z^-1
    h = np.ones_like(z1, dtype=np.complex128)
    for s in cascade.sections:
        h *= (s.b0 + s.b1 * z1 + s.b2 * z1 * z1) / (1.0 + s.a1 * z1 + s.a2 * z1 * z1)
    return h if np.ndim(f_hz) else h[0]


def apply_filter_array(cascade: BiquadCascade, x: np.ndarray, zero_phase: bool = False) -> np.ndarray:
    """Filter along the last axis; causal single pass unless zero_phase."""
    sos = cascade.as_sos()
    if zero_phase:
        return sp_signal.sosfiltfilt(sos, x, axis=-1)
    return sp_signal.sosfilt(sos, x, axis=-1)


def apply_filter(cascade: BiquadCascade, segment: EegSegment, zero_phase: bool = False) -> EegSegment:
    if abs(segment.sample_rate - cascade.sample_rate) > 1e-9:
        raise ValueError(
            f"segment rate {segment.sample_rate} != cascade rate {cascade.sample_rate}"
        )
    return EegSegment(
        subject_id=segment.subject_id,
        data=apply_filter_array(cascade, segment.data, zero_phase=zero_phase),
        label=segment.label,
        sample_rate=segment.sample_rate,
        window_index=segment.window_index,
    )


@lru_cache(maxsize=32)
def _preprocess_cascades(fs: float) -> tuple[BiquadCascade, BiquadCascade]:
    return design_bandpass(1.0, 75.0, fs), design_notch(60.0, 30.0, fs)


def preprocess_array(x: np.ndarray, fs: float, zero_phase: bool = False) -> np.ndarray:
    """Standard preprocessing chain: 1-75 Hz bandpass, then 60 Hz notch."""
    bandpass, notch = _preprocess_cascades(float(fs))
    return apply_filter_array(notch, apply_filter_array(bandpass, x, zero_phase), zero_phase)


def preprocess_segment(segment: EegSegment, zero_phase: bool = False) -> EegSegment:
    return EegSegment(
        subject_id=segment.subject_id,
        data=preprocess_array(segment.data, segment.sample_rate, zero_phase=zero_phase),
        label=segment.label,
        sample_rate=segment.sample_rate,
        window_index=segment.window_index,
    )


def zscore(values) -> np.ndarray:
    """Normalise to mean 0 / population std 1; constant input yields zeros."""
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2:
        raise ValueError(f"zscore needs at least 2 values, got {x.size}")
    var = float(np.var(x))
    if var < VARIANCE_FLOOR:
        flag("zscore: variance below threshold, returning zeros")
        return np.zeros_like(x)
    return (x - x.mean()) / np.sqrt(var)


def zscore_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise zscore, used for per-channel-segment normalisation."""
    return np.stack([zscore(row) for row in np.asarray(x)])


@dataclass(frozen=True)
class NoiseSpec:
    fraction: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"noise fraction must be in [0, 1], got {self.fraction}")


def add_noise(segment: EegSegment, spec: NoiseSpec) -> EegSegment:
    """Add per-channel Gaussian noise with std = fraction x channel std."""
    if spec.fraction == 0.0:
        return segment
    rng = np.random.default_rng(spec.seed)
    data = segment.data.copy()
    for c in range(data.shape[0]):
        sd = float(np.std(data[c]))
        data[c] += rng.normal(0.0, spec.fraction * sd, size=data.shape[1])
    return EegSegment(
        subject_id=segment.subject_id,
        data=data,
        label=segment.label,
        sample_rate=segment.sample_rate,
        window_index=segment.window_index,
    )
