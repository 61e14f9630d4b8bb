"""Experiment commands over the pipeline: end-to-end LOSO runs, the ablation
suite, noise robustness, channel/band importance, attention-weight export,
and the beta sweep. Every command writes deterministic JSON/TSV artefacts
and records the exact resolved configuration so reruns are bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace, asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .data import (
    CHANNEL_NAMES,
    EegSegment,
    load_dataset,
    segment_recording,
    synth_generate,
)
from .dsp import NoiseSpec
from .model import DualStreamModel
from .pipeline import FeaturePipeline
from .spectral import BANDS
from .trainer import (
    FoldOutcome,
    LosoResult,
    Metrics,
    TrainConfig,
    evaluate,
    run_loso,
    summarize,
)

ROBUSTNESS_FRACTIONS = (0.1, 0.3, 0.5, 0.7)
BETA_SWEEP_VALUES = (0.4, 0.7, 1.0)


@dataclass(frozen=True)
class RunConfig:
    """Resolved experiment configuration (also the on-disk config format)."""

    data: str = ""
    synthetic: bool = True
    subjects: int = 6
    segments: int = 40
    features: str = "psd"  # psd | de
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-4
    beta: float = 0.4
    seed: int = 0
    jobs: int = 1
    no_oc: bool = False
    no_attention: bool = False
    raw_only: bool = False
    topo_only: bool = False
    zero_phase: bool = False
    linear_power: bool = False
    pair_mean: bool = False
    macro_f1: bool = False

    def __post_init__(self) -> None:
        if self.raw_only and self.topo_only:
            raise ValueError("raw_only and topo_only are mutually exclusive")
        if self.features not in ("psd", "de"):
            raise ValueError(f"features must be psd or de, got {self.features!r}")
        if not self.synthetic and not self.data:
            raise ValueError("either synthetic data or a data directory is required")


_BOOL_KEYS = {f.name for f in fields(RunConfig) if f.type == "bool"}
_INT_KEYS = {f.name for f in fields(RunConfig) if f.type == "int"}
_FLOAT_KEYS = {f.name for f in fields(RunConfig) if f.type == "float"}


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse `key=value` lines (# comments); unknown keys are rejected."""
    values = asdict(base) if base is not None else {}
    known = {f.name for f in fields(RunConfig)}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ValueError(f"line {lineno}: expected key=value, got {raw_line!r}")
        if key not in known:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in _BOOL_KEYS:
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(f"line {lineno}: {key} must be true/false")
            values[key] = value.lower() in ("true", "1")
        elif key in _INT_KEYS:
            values[key] = int(value)
        elif key in _FLOAT_KEYS:
            values[key] = float(value)
        else:
            values[key] = value
    return RunConfig(**values)


def config_text(cfg: RunConfig) -> str:
    lines = [f"# cogload run configuration (version {__version__})"]
    for key, value in sorted(asdict(cfg).items()):
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def train_config(cfg: RunConfig) -> TrainConfig:
    """Map run options onto the trainer config, with the ablation semantics:
    single-domain variants also drop the pairwise loss and the attention gate."""
    streams: tuple[str, ...] = ("raw", "topo")
    attention = not cfg.no_attention
    beta = 0.0 if cfg.no_oc else cfg.beta
    if cfg.raw_only:
        streams, attention, beta = ("raw",), False, 0.0
    elif cfg.topo_only:
        streams, attention, beta = ("topo",), False, 0.0
    return TrainConfig(
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        epochs=cfg.epochs,
        beta=beta,
        seed=cfg.seed,
        attention=attention,
        streams=streams,
        pair_mean=cfg.pair_mean,
        macro_f1=cfg.macro_f1,
        jobs=cfg.jobs,
    )


def make_pipeline(cfg: RunConfig) -> FeaturePipeline:
    return FeaturePipeline(
        feature=cfg.features, zero_phase=cfg.zero_phase, linear_power=cfg.linear_power
    )


def load_segments(cfg: RunConfig) -> list[EegSegment]:
    if cfg.synthetic:
        return synth_generate(cfg.subjects, cfg.segments, seed=cfg.seed)
    segments: list[EegSegment] = []
    for rec in load_dataset(cfg.data):
        segments.extend(segment_recording(rec))
    if not segments:
        raise ValueError(f"no labelled segments found under {cfg.data}")
    return segments


# --- deterministic serialisation -------------------------------------------------


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _metrics_dict(m: Metrics | None) -> dict | None:
    if m is None:
        return None
    d = {
        "accuracy": m.accuracy,
        "f1": m.f1,
        "tp": m.tp,
        "fp": m.fp,
        "tn": m.tn,
        "fn": m.fn,
    }
    if m.macro_f1 is not None:
        d["macro_f1"] = m.macro_f1
    return d


def _fold_payload(fold: FoldOutcome) -> dict:
    payload: dict = {
        "test_subject": fold.test_subject,
        "metrics": _metrics_dict(fold.metrics),
        "error": fold.error,
        "epoch_log": fold.epoch_log,
    }
    if fold.eval_result is not None:
        payload["scores"] = [float(s) for s in fold.eval_result.scores]
        payload["labels"] = [int(v) for v in fold.eval_result.labels]
    return payload


def write_run_results(out_dir: Path, cfg: RunConfig, result: LosoResult) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config_text(cfg))
    for fold in result.folds:
        _dump_json(out_dir / f"fold_{fold.test_subject}.json", _fold_payload(fold))
        if fold.checkpoint is not None:
            ad.save_checkpoint(fold.checkpoint, out_dir / f"ckpt_{fold.test_subject}.ckpt")
        if fold.eval_result is not None and fold.eval_result.fused is not None:
            _write_vectors_tsv(
                out_dir / f"embeddings_{fold.test_subject}.tsv",
                fold, fold.eval_result.fused, "e",
            )
        if fold.eval_result is not None and fold.eval_result.gates is not None:
            _write_vectors_tsv(
                out_dir / f"gates_{fold.test_subject}.tsv",
                fold, fold.eval_result.gates, "a",
            )
    _dump_json(out_dir / "summary.json", {"config_version": __version__, **result.summary})
    with open(out_dir / "summary.tsv", "w") as f:
        f.write("subject\taccuracy\tf1\terror\n")
        for fold in result.folds:
            if fold.metrics is None:
                f.write(f"{fold.test_subject}\t\t\t{fold.error}\n")
            else:
                f.write(
                    f"{fold.test_subject}\t{fold.metrics.accuracy:.6f}"
                    f"\t{fold.metrics.f1:.6f}\t\n"
                )
        if "accuracy" in result.summary:
            f.write(f"mean(std)\t{result.summary['accuracy']}\t{result.summary['f1']}\t\n")


def _write_vectors_tsv(path: Path, fold: FoldOutcome, vectors: np.ndarray, prefix: str) -> None:
    dim = vectors.shape[1]
    header = ["subject", "window", "label"] + [f"{prefix}{i}" for i in range(dim)]
    if prefix == "a":
        header.append("mean_gate")
    with open(path, "w") as f:
        f.write("\t".join(header) + "\n")
        labels = fold.eval_result.labels
        for i in range(vectors.shape[0]):
            row = [fold.test_subject, str(i), str(int(labels[i]))]
            row += [f"{v:.6f}" for v in vectors[i]]
            if prefix == "a":
                row.append(f"{float(np.mean(vectors[i])):.6f}")
            f.write("\t".join(row) + "\n")


# --- commands ------------------------------------------------------------------


def cmd_run(cfg: RunConfig, out_dir: Path) -> LosoResult:
    segments = load_segments(cfg)
    result = run_loso(segments, train_config(cfg), make_pipeline(cfg))
    write_run_results(Path(out_dir), cfg, result)
    return result


ABLATION_ROWS = (
    ("full", {}),
    ("no_oc", {"no_oc": True}),
    ("no_attention", {"no_attention": True}),
    ("no_oc_no_attention", {"no_oc": True, "no_attention": True}),
    ("raw_only", {"raw_only": True}),
    ("topo_only", {"topo_only": True}),
)


def cmd_ablation_suite(cfg: RunConfig, out_dir: Path) -> dict[str, LosoResult]:
    """The six configuration rows of the module-ablation table, shared seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results: dict[str, LosoResult] = {}
    for name, overrides in ABLATION_ROWS:
        sub_cfg = replace(cfg, **overrides)
        results[name] = cmd_run(sub_cfg, out_dir / name)
    with open(out_dir / "ablation.tsv", "w") as f:
        f.write("configuration\taccuracy\tf1\n")
        for name, res in results.items():
            f.write(
                f"{name}\t{res.summary.get('accuracy', '')}\t{res.summary.get('f1', '')}\n"
            )
    return results


def _load_run(run_dir: Path):
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.txt"
    if not cfg_path.exists():
        raise FileNotFoundError(f"no config.txt in {run_dir} (not a run directory?)")
    cfg = parse_config_text(cfg_path.read_text())
    tconf = train_config(cfg)
    pipe = make_pipeline(cfg)
    segments = load_segments(cfg)
    by_subject: dict[str, list[EegSegment]] = {}
    for seg in segments:
        by_subject.setdefault(seg.subject_id, []).append(seg)
    models: dict[str, DualStreamModel] = {}
    for subject in sorted(by_subject):
        ckpt = run_dir / f"ckpt_{subject}.ckpt"
        if not ckpt.exists():
            raise FileNotFoundError(f"missing checkpoint {ckpt}")
        model = DualStreamModel(
            seed=tconf.seed, attention=tconf.attention, streams=tconf.streams
        )
        model.load_entries(ad.load_checkpoint(ckpt))
        models[subject] = model
    return cfg, tconf, pipe, by_subject, models


def _fold_stats(pipe: FeaturePipeline, prepared_by_subject: dict, test_subject: str):
    train_prep = [
        p
        for s, plist in sorted(prepared_by_subject.items())
        if s != test_subject
        for p in plist
    ]
    return pipe.fit_stats(train_prep, test_subject)


def cmd_robustness(run_dir: Path, fractions=ROBUSTNESS_FRACTIONS) -> list[dict]:
    """Evaluate each fold's checkpoint on noisy test signals.

    Noise is added to the raw test segments before feature extraction, so the
    topography maps are recomputed from the noisy signal. Fraction 0 is
    always included and reproduces the clean evaluation bit-exactly.
    """
    run_dir = Path(run_dir)
    cfg, tconf, pipe, by_subject, models = _load_run(run_dir)
    prepared_clean = {s: pipe.prepare_many(v) for s, v in sorted(by_subject.items())}
    rows: list[dict] = []
    all_fractions = [0.0] + [f for f in fractions if f > 0]
    for subject in sorted(by_subject):
        stats = _fold_stats(pipe, prepared_clean, subject)
        for fi, fraction in enumerate(all_fractions):
            if fraction == 0.0:
                test_prep = prepared_clean[subject]
            else:
                noise_seed = cfg.seed * 10000 + fi * 100 + _subject_index(by_subject, subject)
                test_prep = pipe.prepare_many(
                    by_subject[subject], noise=NoiseSpec(fraction=fraction, seed=noise_seed)
                )
            inputs = pipe.model_inputs(test_prep, stats)
            res = evaluate(models[subject], inputs, batch_size=tconf.batch_size,
                           macro_f1=tconf.macro_f1)
            rows.append(
                {
                    "fraction": fraction,
                    "subject": subject,
                    "accuracy": res.metrics.accuracy,
                    "f1": res.metrics.f1,
                }
            )
    _dump_json(run_dir / "robustness.json", rows)
    with open(run_dir / "robustness.tsv", "w") as f:
        f.write("fraction\tsubject\taccuracy\tf1\n")
        for r in rows:
            f.write(f"{r['fraction']}\t{r['subject']}\t{r['accuracy']:.6f}\t{r['f1']:.6f}\n")
    return rows


def _subject_index(by_subject: dict, subject: str) -> int:
    return sorted(by_subject).index(subject)


def cmd_importance(run_dir: Path, axis: str) -> list[dict]:
    """Zero-mask all but one channel (or band) and evaluate each variant.

    Channels: all other raw channels and their interpolated map contributions
    are zeroed. Bands: the raw stream is bandpass-restricted to the kept band
    and all other bands' map planes are zeroed.
    """
    if axis not in ("channel", "band"):
        raise ValueError(f"axis must be 'channel' or 'band', got {axis!r}")
    run_dir = Path(run_dir)
    cfg, tconf, pipe, by_subject, models = _load_run(run_dir)
    prepared_clean = {s: pipe.prepare_many(v) for s, v in sorted(by_subject.items())}
    units = list(CHANNEL_NAMES) if axis == "channel" else [b.name for b in BANDS]
    rows: list[dict] = []
    for unit_idx, unit in enumerate(units):
        for subject in sorted(by_subject):
            stats = _fold_stats(pipe, prepared_clean, subject)
            if axis == "channel":
                test_prep = prepared_clean[subject]
                inputs = pipe.model_inputs(test_prep, stats, channel_keep=unit_idx)
            else:
                test_prep = pipe.prepare_many(by_subject[subject], band_keep=unit_idx)
                inputs = pipe.model_inputs(test_prep, stats, band_keep=unit_idx)
            res = evaluate(models[subject], inputs, batch_size=tconf.batch_size,
                           macro_f1=tconf.macro_f1)
            rows.append(
                {
                    "axis": axis,
                    "unit": unit,
                    "subject": subject,
                    "accuracy": res.metrics.accuracy,
                    "f1": res.metrics.f1,
                }
            )
    _dump_json(run_dir / f"importance_{axis}.json", rows)
    with open(run_dir / f"importance_{axis}.tsv", "w") as f:
        f.write("axis\tunit\tsubject\taccuracy\tf1\n")
        for r in rows:
            f.write(
                f"{r['axis']}\t{r['unit']}\t{r['subject']}"
                f"\t{r['accuracy']:.6f}\t{r['f1']:.6f}\n"
            )
    return rows


def cmd_attention_export(run_dir: Path) -> Path:
    """Per test sample gate vectors (sigmoid outputs) plus the mean gate."""
    run_dir = Path(run_dir)
    cfg, tconf, pipe, by_subject, models = _load_run(run_dir)
    if not tconf.attention or len(tconf.streams) != 2:
        raise ValueError("this run has no attention gate to export")
    prepared_clean = {s: pipe.prepare_many(v) for s, v in sorted(by_subject.items())}
    out = run_dir / "attention_gates.tsv"
    first = True
    with open(out, "w") as f:
        for subject in sorted(by_subject):
            stats = _fold_stats(pipe, prepared_clean, subject)
            inputs = pipe.model_inputs(prepared_clean[subject], stats)
            res = evaluate(models[subject], inputs, batch_size=tconf.batch_size)
            gates = res.gates
            if first:
                header = ["subject", "window", "label"]
                header += [f"a{i}" for i in range(gates.shape[1])]
                header.append("mean_gate")
                f.write("\t".join(header) + "\n")
                first = False
            for i in range(gates.shape[0]):
                row = [subject, str(inputs.windows[i]), str(int(inputs.labels[i]))]
                row += [f"{v:.6f}" for v in gates[i]]
                row.append(f"{float(np.mean(gates[i])):.6f}")
                f.write("\t".join(row) + "\n")
    return out


def cmd_beta_sweep(cfg: RunConfig, out_dir: Path, betas=BETA_SWEEP_VALUES) -> list[dict]:
    """3 beta values x attention on/off, all with the same seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    for attention in (True, False):
        for beta in betas:
            sub_cfg = replace(cfg, beta=beta, no_attention=not attention, no_oc=False)
            name = f"beta{beta:g}_{'attn' if attention else 'noattn'}"
            result = cmd_run(sub_cfg, out_dir / name)
            rows.append(
                {
                    "beta": beta,
                    "attention": attention,
                    "seed": cfg.seed,
                    "accuracy": result.summary.get("accuracy_mean"),
                    "f1": result.summary.get("f1_mean"),
                    "accuracy_fmt": result.summary.get("accuracy"),
                    "f1_fmt": result.summary.get("f1"),
                }
            )
    _dump_json(out_dir / "beta_sweep.json", rows)
    with open(out_dir / "beta_sweep.tsv", "w") as f:
        f.write("beta\tattention\tseed\taccuracy\tf1\n")
        for r in rows:
            f.write(
                f"{r['beta']}\t{int(r['attention'])}\t{r['seed']}"
                f"\t{r['accuracy_fmt']}\t{r['f1_fmt']}\n"
            )
    return rows
