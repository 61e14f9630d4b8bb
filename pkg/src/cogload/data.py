"""Dataset model: recordings, labelled 10 s segments, LOSO splits, synthetic EEG,
and the on-disk raw format (float32-LE matrix + plain-text header + labels.tsv).
"""

from __future__ import annotations

import csv
import enum
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHANNEL_NAMES: tuple[str, ...] = ("TP9", "AF7", "AF8", "TP10")
N_CHANNELS = 4
DEFAULT_SAMPLE_RATE = 256.0
WINDOW_SECONDS = 10.0

RAW_FILENAME = "recording.f32le"
META_FILENAME = "recording.meta"
LABELS_FILENAME = "labels.tsv"


class CognitiveLoadLabel(enum.Enum):
    LOW = 0
    HIGH = 1


def binarize_paas(score: int) -> CognitiveLoadLabel:
    """Map a 9-point self-report score to a binary label (1..5 low, 6..9 high)."""
    if not isinstance(score, (int, np.integer)):
        raise ValueError(f"paas score must be an integer, got {score!r}")
    if not 1 <= score <= 9:
        raise ValueError(f"paas score must be in [1, 9], got {score}")
    return CognitiveLoadLabel.LOW if score <= 5 else CognitiveLoadLabel.HIGH


@dataclass(frozen=True)
class EegRecording:
    """A full multi-channel recording for one subject with per-window scores."""

    subject_id: str
    samples: np.ndarray  # (4, n_samples) microvolts
    sample_rate: float = DEFAULT_SAMPLE_RATE
    channels: tuple[str, ...] = CHANNEL_NAMES
    paas_scores: tuple[tuple[int, int], ...] = ()  # (window_index, score 1..9)

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] != N_CHANNELS:
            raise ValueError(f"samples must have shape (4, n), got {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if len(self.channels) != N_CHANNELS:
            raise ValueError(f"expected {N_CHANNELS} channel names, got {len(self.channels)}")
        for _, score in self.paas_scores:
            if not 1 <= score <= 9:
                raise ValueError(f"paas score out of range: {score}")
        object.__setattr__(self, "samples", samples)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass(frozen=True)
class EegSegment:
    """One labelled window of raw EEG, 4 x (window seconds * sample rate)."""

    subject_id: str
    data: np.ndarray  # (4, T) microvolts
    label: CognitiveLoadLabel
    sample_rate: float = DEFAULT_SAMPLE_RATE
    window_index: int = 0

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] != N_CHANNELS:
            raise ValueError(f"segment data must have shape (4, T), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("segment data contains NaN/Inf")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "data", data)

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class LosoSplit:
    test_subject: str
    train_subjects: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if self.test_subject in self.train_subjects:
            raise ValueError(f"test subject {self.test_subject!r} appears in train set")


def loso_splits(subjects) -> list[LosoSplit]:
    """One leave-one-subject-out split per subject, ordered by subject id."""
    unique = sorted(set(subjects))
    if len(unique) < 2:
        raise ValueError(f"LOSO needs at least 2 subjects, got {len(unique)}")
    return [
        LosoSplit(test_subject=s, train_subjects=frozenset(u for u in unique if u != s))
        for s in unique
    ]


def segment_recording(rec: EegRecording, window_s: float = WINDOW_SECONDS) -> list[EegSegment]:
    """Cut a recording into consecutive non-overlapping labelled windows.

    The trailing partial window is dropped. Windows without a paas score are
    skipped with a warning (count reported in the message).
    """
    win = int(round(window_s * rec.sample_rate))
    if win <= 0:
        raise ValueError(f"window of {window_s} s is empty at fs={rec.sample_rate}")
    if rec.n_samples < win:
        return []
    scores = dict(rec.paas_scores)
    n_windows = rec.n_samples // win
    segments: list[EegSegment] = []
    skipped = 0
    for w in range(n_windows):
        if w not in scores:
            skipped += 1
            continue
        segments.append(
            EegSegment(
                subject_id=rec.subject_id,
                data=rec.samples[:, w * win:(w + 1) * win],
                label=binarize_paas(scores[w]),
                sample_rate=rec.sample_rate,
                window_index=w,
            )
        )
    if skipped:
        warnings.warn(
            f"{rec.subject_id}: skipped {skipped} unlabelled window(s)", UserWarning, stacklevel=2
        )
    return segments


# --- synthetic generator -----------------------------------------------------

# Band-limited tone per EEG band: (frequency Hz, base amplitude uV).
SYNTH_TONES = {
    "Delta": (2.5, 8.0),
    "Theta": (6.0, 6.0),
    "Alpha": (10.0, 6.0),
    "Beta": (20.0, 3.0),
    "Gamma": (40.0, 1.5),
}
# High-load segments scale theta power up and alpha power down, mirroring the
# physiology the classifier is meant to pick up.
SYNTH_HIGH_SCALE = {"Theta": 2.0, "Alpha": 0.5}
SYNTH_NOISE_STD = 2.0  # uV, 1/f-shaped


def _pink_noise(rng: np.random.Generator, n: int, fs: float, std: float) -> np.ndarray:
    """Gaussian noise with ~1/f power shaping, normalised to the given std."""
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    shaping = 1.0 / np.sqrt(np.maximum(freqs, 1.0))
    spectrum = (rng.standard_normal(freqs.size) + 1j * rng.standard_normal(freqs.size)) * shaping
    spectrum[0] = 0.0
    x = np.fft.irfft(spectrum, n=n)
    sd = float(np.std(x))
    return x * (std / sd) if sd > 0 else x


def synth_generate(
    n_subjects: int,
    segs_per_subject: int,
    seed: int,
    sample_rate: float = DEFAULT_SAMPLE_RATE,
    window_s: float = WINDOW_SECONDS,
) -> list[EegSegment]:
    """Deterministic class-conditional synthetic EEG segments.

    Each segment is a sum of one tone per EEG band plus 1/f Gaussian noise.
    High-load segments double theta amplitude and halve alpha amplitude.
    Subject variability comes from per-subject random channel gains, band
    gains and phase offsets; tone phases and amplitudes additionally jitter
    per segment so spectral power, not a waveform template, carries the
    class. Labels alternate LOW/HIGH so counts stay balanced.
    """
    if n_subjects < 1 or segs_per_subject < 1:
        raise ValueError("n_subjects and segs_per_subject must be >= 1")
    rng = np.random.default_rng(seed)
    n = int(round(window_s * sample_rate))
    t = np.arange(n) / sample_rate
    n_bands = len(SYNTH_TONES)
    segments: list[EegSegment] = []
    for s in range(n_subjects):
        subject = f"S{s:02d}"
        gains = rng.uniform(0.8, 1.2, size=N_CHANNELS)
        band_gains = rng.uniform(0.85, 1.15, size=n_bands)
        subject_phase = rng.uniform(0.0, 2.0 * np.pi, size=(N_CHANNELS, n_bands))
        for w in range(segs_per_subject):
            label = CognitiveLoadLabel.LOW if w % 2 == 0 else CognitiveLoadLabel.HIGH
            jitter = rng.uniform(0.95, 1.05, size=n_bands)
            phases = subject_phase + rng.uniform(0.0, 2.0 * np.pi, size=(N_CHANNELS, n_bands))
            data = np.empty((N_CHANNELS, n))
            for c in range(N_CHANNELS):
                x = np.zeros(n)
                for b, (name, (freq, amp)) in enumerate(SYNTH_TONES.items()):
                    if label is CognitiveLoadLabel.HIGH:
                        amp = amp * SYNTH_HIGH_SCALE.get(name, 1.0)
                    amp = amp * gains[c] * band_gains[b] * jitter[b]
                    x += amp * np.sin(2.0 * np.pi * freq * t + phases[c, b])
                x += _pink_noise(rng, n, sample_rate, SYNTH_NOISE_STD)
                data[c] = x
            segments.append(
                EegSegment(
                    subject_id=subject,
                    data=data,
                    label=label,
                    sample_rate=sample_rate,
                    window_index=w,
                )
            )
    return segments


# --- on-disk format ----------------------------------------------------------


def save_recording(root: Path | str, rec: EegRecording) -> Path:
    """Write `<subject>/recording.f32le` + `.meta` + `labels.tsv` under root."""
    subject_dir = Path(root) / rec.subject_id
    subject_dir.mkdir(parents=True, exist_ok=True)
    rec.samples.astype("<f4").tofile(subject_dir / RAW_FILENAME)
    meta = (
        f"sample_rate={rec.sample_rate:g}\n"
        f"channels={','.join(rec.channels)}\n"
        f"n_samples={rec.n_samples}\n"
    )
    (subject_dir / META_FILENAME).write_text(meta)
    with open(subject_dir / LABELS_FILENAME, "w") as f:
        for w, score in rec.paas_scores:
            f.write(f"{w}\t{score}\n")
    return subject_dir


def load_recording(root: Path | str, subject_id: str) -> EegRecording:
    subject_dir = Path(root) / subject_id
    meta: dict[str, str] = {}
    for line in (subject_dir / META_FILENAME).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    sample_rate = float(meta["sample_rate"])
    channels = tuple(meta["channels"].split(","))
    n_samples = int(meta["n_samples"])
    raw = np.fromfile(subject_dir / RAW_FILENAME, dtype="<f4")
    if raw.size != N_CHANNELS * n_samples:
        raise ValueError(
            f"{subject_dir}: expected {N_CHANNELS * n_samples} samples, found {raw.size}"
        )
    samples = raw.reshape(N_CHANNELS, n_samples).astype(np.float64)
    scores: list[tuple[int, int]] = []
    labels_path = subject_dir / LABELS_FILENAME
    if labels_path.exists():
        for line in labels_path.read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            w, score = line.split("\t")
            scores.append((int(w), int(score)))
    return EegRecording(
        subject_id=subject_id,
        samples=samples,
        sample_rate=sample_rate,
        channels=channels,
        paas_scores=tuple(scores),
    )


def load_dataset(root: Path | str) -> list[EegRecording]:
    """Load all subject directories under root, sorted by subject id."""
    root = Path(root)
    recs = []
    for sub in sorted(p.name for p in root.iterdir() if (p / META_FILENAME).exists()):
        recs.append(load_recording(root, sub))
    if not recs:
        raise ValueError(f"no subject directories with {META_FILENAME} under {root}")
    return recs


def import_csv(
    csv_path: Path | str,
    out_root: Path | str,
    subject_id: str,
    sample_rate: float | None = None,
) -> Path:
    """Convert a `t,ch1,ch2,ch3,ch4` CSV into the binary recording format.

    When sample_rate is omitted it is inferred from the median time step.
    """
    rows = []
    with open(csv_path, newline="") as f:
        reader = csv.DictReader(f)
        required = {"t", "ch1", "ch2", "ch3", "ch4"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"CSV must have columns {sorted(required)}, got {reader.fieldnames}")
        for row in reader:
            rows.append([float(row[k]) for k in ("t", "ch1", "ch2", "ch3", "ch4")])
    if len(rows) < 2:
        raise ValueError("CSV must contain at least 2 sample rows")
    arr = np.asarray(rows)
    if sample_rate is None:
        dt = float(np.median(np.diff(arr[:, 0])))
        if dt <= 0:
            raise ValueError("time column is not increasing")
        sample_rate = round(1.0 / dt)
    rec = EegRecording(subject_id=subject_id, samples=arr[:, 1:].T, sample_rate=float(sample_rate))
    return save_recording(out_root, rec)


def segments_to_recording(segments: list[EegSegment]) -> EegRecording:
    """Concatenate one subject's segments back into a recording with labels.

    Synthetic binary labels are stored as representative paas scores
    (LOW -> 3, HIGH -> 7) so the round trip through binarize_paas is exact.
    """
    if not segments:
        raise ValueError("no segments given")
    subjects = {s.subject_id for s in segments}
    if len(subjects) != 1:
        raise ValueError(f"segments span multiple subjects: {sorted(subjects)}")
    ordered = sorted(segments, key=lambda s: s.window_index)
    scores = tuple(
        (i, 3 if s.label is CognitiveLoadLabel.LOW else 7) for i, s in enumerate(ordered)
    )
    return EegRecording(
        subject_id=ordered[0].subject_id,
        samples=np.concatenate([s.data for s in ordered], axis=1),
        sample_rate=ordered[0].sample_rate,
        paas_scores=scores,
    )
