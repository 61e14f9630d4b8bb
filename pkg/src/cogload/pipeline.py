"""Segment -> model-input pipeline with leakage-safe normalisation.

The raw stream is filtered and z-scored per channel-segment; the frequency
stream goes segment -> Welch band powers (or differential entropies) ->
log10 (PSD only) -> per-dimension z-score with statistics fitted on the
training fold only -> multi-spectral topography maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dsp, spectral, topomap
from .data import EegSegment

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class FoldStats:
    """Per-dimension normalisation statistics with provenance tags."""

    mean: np.ndarray  # (20,)
    std: np.ndarray  # (20,)
    train_subjects: frozenset[str]
    test_subject: str

    def check_no_leakage(self, subject_id: str) -> None:
        if subject_id != self.test_subject and subject_id not in self.train_subjects:
            raise ValueError(f"subject {subject_id!r} unknown to this fold's statistics")
        if subject_id == self.test_subject and subject_id in self.train_subjects:
            raise AssertionError("test subject leaked into training statistics")


@dataclass(frozen=True)
class PreparedSegment:
    """Per-segment artefacts shared by both streams."""

    subject_id: str
    label: int
    filtered: np.ndarray  # (4, T) preprocessed microvolts
    features: np.ndarray  # (20,) log10 band powers or DE values
    window_index: int = 0


@dataclass
class ModelInputs:
    raw: np.ndarray  # (N, 4, T) float32
    topo: np.ndarray  # (N, 15, 32, 32) float32
    labels: np.ndarray  # (N,) int
    subjects: list[str] = field(default_factory=list)
    windows: list[int] = field(default_factory=list)


class FeaturePipeline:
    """Turns segments into the two model input tensors.

    feature: "psd" (log10 Simpson band powers) or "de" (differential
    entropies, already log-scale). Evaluation-time perturbations (noise,
    channel or band masking) are applied per the experiment protocols.
    """

    def __init__(
        self,
        feature: str = "psd",
        zero_phase: bool = False,
        linear_power: bool = False,
        welch_win_s: float = spectral.DEFAULT_WELCH_WINDOW_S,
    ):
        if feature not in ("psd", "de"):
            raise ValueError(f"feature must be 'psd' or 'de', got {feature!r}")
        self.feature = feature
        self.zero_phase = zero_phase
        self.linear_power = linear_power
        self.welch_win_s = welch_win_s
        self.layout = topomap.default_layout()

    # -- per-segment preparation -------------------------------------------

    def prepare(
        self,
        segment: EegSegment,
        noise: dsp.NoiseSpec | None = None,
        band_keep: int | None = None,
    ) -> PreparedSegment:
        if noise is not None:
            segment = dsp.add_noise(segment, noise)
        filtered = dsp.preprocess_array(
            segment.data, segment.sample_rate, zero_phase=self.zero_phase
        )
        if band_keep is not None:
            band = spectral.BANDS[band_keep]
            restrict = dsp.design_bandpass(band.lo_hz, band.hi_hz, segment.sample_rate)
            filtered = dsp.apply_filter_array(restrict, filtered, zero_phase=self.zero_phase)
        seg_f = EegSegment(
            subject_id=segment.subject_id,
            data=filtered,
            label=segment.label,
            sample_rate=segment.sample_rate,
            window_index=segment.window_index,
        )
        if self.feature == "de":
            mat = spectral.de_matrix(seg_f)
        else:
            mat = spectral.band_power_matrix(seg_f, win_s=self.welch_win_s)
        feats = mat.reshape(-1)
        if self.feature == "psd" and not self.linear_power:
            feats = np.log10(np.maximum(feats, LOG_FLOOR))
        return PreparedSegment(
            subject_id=segment.subject_id,
            label=segment.label.value,
            filtered=filtered,
            features=feats,
            window_index=segment.window_index,
        )

    def prepare_many(self, segments, **kwargs) -> list[PreparedSegment]:
        return [self.prepare(s, **kwargs) for s in segments]

    # -- fold statistics ------------------------------------------------------

    def fit_stats(
        self, train_prepared: list[PreparedSegment], test_subject: str
    ) -> FoldStats:
        """Population mean/std of each feature dimension over the training fold."""
        train_subjects = frozenset(p.subject_id for p in train_prepared)
        if test_subject in train_subjects:
            raise ValueError(f"test subject {test_subject!r} present in training data")
        feats = np.stack([p.features for p in train_prepared])
        mean = feats.mean(axis=0)
        std = feats.std(axis=0)
        return FoldStats(
            mean=mean,
            std=np.where(std < 1e-12, 1.0, std),
            train_subjects=train_subjects,
            test_subject=test_subject,
        )

    # -- model inputs --------------------------------------------------------

    def model_inputs(
        self,
        prepared: list[PreparedSegment],
        stats: FoldStats,
        channel_keep: int | None = None,
        band_keep: int | None = None,
    ) -> ModelInputs:
        """Assemble (raw, topo, labels); masks zero raw channels / map planes."""
        n = len(prepared)
        t = prepared[0].filtered.shape[1]
        raw = np.empty((n, 4, t), dtype=np.float32)
        topo_t = np.empty((n, 15, topomap.GRID_SIZE, topomap.GRID_SIZE), dtype=np.float32)
        labels = np.empty(n, dtype=np.int64)
        for i, p in enumerate(prepared):
            stats.check_no_leakage(p.subject_id)
            z = dsp.zscore_rows(p.filtered)
            if channel_keep is not None:
                masked = np.zeros_like(z)
                masked[channel_keep] = z[channel_keep]
                z = masked
            raw[i] = z.astype(np.float32)
            normed = (p.features - stats.mean) / stats.std
            if channel_keep is not None:
                masked_f = np.zeros_like(normed.reshape(4, 5))
                masked_f[channel_keep] = normed.reshape(4, 5)[channel_keep]
                normed = masked_f.reshape(-1)
            # Features are already log/DE scale, so the maps use linear mode.
            m = topomap.build_multispectral_map(
                normed.reshape(4, 5), self.layout, log_power=False
            )
            planes = m.channel_first()
            if band_keep is not None:
                masked_planes = np.zeros_like(planes)
                sl = slice(3 * band_keep, 3 * band_keep + 3)
                masked_planes[sl] = planes[sl]
                planes = masked_planes
            topo_t[i] = planes.astype(np.float32)
            labels[i] = p.label
        return ModelInputs(
            raw=raw,
            topo=topo_t,
            labels=labels,
            subjects=[p.subject_id for p in prepared],
            windows=[p.window_index for p in prepared],
        )
