"""Command-line surface for the cognitive-load pipeline experiments.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, experiments
from .data import (
    CognitiveLoadLabel,
    import_csv,
    load_dataset,
    segment_recording,
    segments_to_recording,
    save_recording,
    synth_generate,
)
from .experiments import RunConfig, parse_config_text
from .pipeline import FeaturePipeline
from .spectral import BANDS
from .topomap import GRID_SIZE, write_ppm
from .trainer import NumericalFailure

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(ValueError):
    pass


class DataError(ValueError):
    pass


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cogload",
        description="EEG cognitive-load pipeline: preprocessing, topography maps, "
        "dual-stream training, and the experiment suite.",
    )
    parser.add_argument("--version", action="version", version=f"cogload {__version__}")
    parser.add_argument("--config", type=Path, help="key=value config file")
    parser.add_argument("--seed", type=int, help="random seed")
    parser.add_argument("--jobs", type=int, help="concurrent LOSO folds")
    parser.add_argument("--out", type=Path, help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data_flags(p):
        p.add_argument("--data", type=Path, help="dataset root directory")
        p.add_argument("--synthetic", action="store_true", default=None,
                       help="use the synthetic generator")
        p.add_argument("--subjects", type=int, help="synthetic subject count")
        p.add_argument("--segments", type=int, help="synthetic segments per subject")

    def add_train_flags(p):
        p.add_argument("--features", choices=("psd", "de"))
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--lr", type=float)
        p.add_argument("--beta", type=float)
        for flag in ("no-oc", "no-attention", "raw-only", "topo-only", "zero-phase",
                     "linear-power", "pair-mean", "macro-f1"):
            p.add_argument(f"--{flag}", action="store_true", default=None,
                           dest=flag.replace("-", "_"))

    p_synth = sub.add_parser("synth", help="write a synthetic dataset to disk")
    p_synth.add_argument("--subjects", type=int, default=6)
    p_synth.add_argument("--segments", type=int, default=40)

    p_csv = sub.add_parser("import-csv", help="convert a t,ch1..ch4 CSV recording")
    p_csv.add_argument("csv", type=Path)
    p_csv.add_argument("--subject", required=True)
    p_csv.add_argument("--sample-rate", type=float, default=None, dest="sample_rate")

    p_feat = sub.add_parser("featurize", help="write per-segment band features as TSV")
    add_data_flags(p_feat)
    p_feat.add_argument("--features", choices=("psd", "de"))

    p_topo = sub.add_parser("topomap", help="dump multi-spectral map tensors + previews")
    add_data_flags(p_topo)
    p_topo.add_argument("--features", choices=("psd", "de"))
    p_topo.add_argument("--linear-power", action="store_true", default=None,
                        dest="linear_power")

    p_run = sub.add_parser("run", help="full LOSO training run")
    add_data_flags(p_run)
    add_train_flags(p_run)
    p_run.add_argument("--ablation-suite", action="store_true", dest="ablation_suite",
                       help="run the six module-ablation configurations")

    p_rob = sub.add_parser("robustness", help="noise robustness over a finished run")
    p_rob.add_argument("--run", type=Path, required=True, dest="run_dir")
    p_rob.add_argument("--fractions", type=float, nargs="+",
                       default=list(experiments.ROBUSTNESS_FRACTIONS))

    p_imp = sub.add_parser("importance", help="channel/band masking importance")
    p_imp.add_argument("--run", type=Path, required=True, dest="run_dir")
    p_imp.add_argument("--axis", choices=("channel", "band"), required=True)

    p_att = sub.add_parser("attention-export", help="export fusion gate vectors")
    p_att.add_argument("--run", type=Path, required=True, dest="run_dir")

    p_beta = sub.add_parser("beta-sweep", help="beta x attention sensitivity grid")
    add_data_flags(p_beta)
    add_train_flags(p_beta)
    p_beta.add_argument("--betas", type=float, nargs="+",
                        default=list(experiments.BETA_SWEEP_VALUES))
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config is not None:
        if not Path(args.config).exists():
            raise DataError(f"config file not found: {args.config}")
        try:
            cfg = parse_config_text(Path(args.config).read_text())
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    overrides = {}
    cfg_fields = {f.name for f in fields(RunConfig)}
    for key in cfg_fields:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value) if key == "data" else value
    if overrides.get("data") and getattr(args, "synthetic", None) is None:
        overrides.setdefault("synthetic", False)
    try:
        return replace(cfg, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _out_dir(args, default: str) -> Path:
    return Path(args.out) if args.out is not None else Path(default)


def _load_segments_checked(cfg: RunConfig):
    try:
        return experiments.load_segments(cfg)
    except (FileNotFoundError, OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc


def _cmd_synth(args) -> int:
    out = _out_dir(args, "dataset")
    seed = args.seed if args.seed is not None else 0
    segments = synth_generate(args.subjects, args.segments, seed=seed)
    by_subject: dict[str, list] = {}
    for seg in segments:
        by_subject.setdefault(seg.subject_id, []).append(seg)
    for subject, segs in sorted(by_subject.items()):
        save_recording(out, segments_to_recording(segs))
    print(f"wrote {len(by_subject)} subjects x {args.segments} windows under {out}")
    return EXIT_OK


def _cmd_import_csv(args) -> int:
    out = _out_dir(args, "dataset")
    try:
        subject_dir = import_csv(args.csv, out, args.subject, sample_rate=args.sample_rate)
    except (FileNotFoundError, OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    print(f"imported {args.csv} -> {subject_dir}")
    return EXIT_OK


def _cmd_featurize(args) -> int:
    cfg = _resolve_config(args)
    segments = _load_segments_checked(cfg)
    pipe = FeaturePipeline(feature=cfg.features, zero_phase=cfg.zero_phase,
                           linear_power=cfg.linear_power)
    out = _out_dir(args, "features")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "features.tsv"
    with open(path, "w") as f:
        cols = [f"{ch}_{band.name}" for ch in ("TP9", "AF7", "AF8", "TP10") for band in BANDS]
        f.write("subject\twindow_index\tlabel\t" + "\t".join(cols) + "\n")
        for seg in segments:
            prepared = pipe.prepare(seg)
            values = "\t".join(f"{v:.6f}" for v in prepared.features)
            f.write(f"{seg.subject_id}\t{seg.window_index}\t{prepared.label}\t{values}\n")
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_topomap(args) -> int:
    cfg = _resolve_config(args)
    segments = _load_segments_checked(cfg)
    pipe = FeaturePipeline(feature=cfg.features, zero_phase=cfg.zero_phase,
                           linear_power=cfg.linear_power)
    out = _out_dir(args, "maps")
    from .topomap import build_multispectral_map

    for seg in segments:
        prepared = pipe.prepare(seg)
        m = build_multispectral_map(prepared.features.reshape(4, 5), pipe.layout,
                                    log_power=False)
        subject_dir = out / seg.subject_id
        subject_dir.mkdir(parents=True, exist_ok=True)
        m.tensor.astype("<f4").tofile(subject_dir / f"{seg.window_index}.f32le")
        for b, band in enumerate(BANDS):
            write_ppm(
                subject_dir / f"{seg.window_index}_{band.name.lower()}.ppm",
                m.tensor[:, :, 3 * b:3 * b + 3],
            )
    print(f"wrote {GRID_SIZE}x{GRID_SIZE}x15 tensors for {len(segments)} segments under {out}")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, "results/run")
    if getattr(args, "ablation_suite", False):
        results = experiments.cmd_ablation_suite(cfg, out)
        for name, res in results.items():
            print(f"{name}: accuracy {res.summary.get('accuracy')} f1 {res.summary.get('f1')}")
    else:
        _load_segments_checked(cfg)  # fail fast with exit code 3 on bad data
        result = experiments.cmd_run(cfg, out)
        for fold in result.folds:
            if fold.metrics is None:
                print(f"fold {fold.test_subject}: FAILED ({fold.error})")
            else:
                print(
                    f"fold {fold.test_subject}: accuracy {fold.metrics.accuracy:.4f} "
                    f"f1 {fold.metrics.f1:.4f}"
                )
        print(f"summary: accuracy {result.summary.get('accuracy')} f1 {result.summary.get('f1')}")
    print(f"results in {out}")
    return EXIT_OK


def _cmd_robustness(args) -> int:
    try:
        rows = experiments.cmd_robustness(args.run_dir, fractions=tuple(args.fractions))
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    fractions = sorted({r["fraction"] for r in rows})
    for fraction in fractions:
        accs = [r["accuracy"] for r in rows if r["fraction"] == fraction]
        print(f"fraction {fraction:g}: mean accuracy {np.mean(accs):.4f}")
    return EXIT_OK


def _cmd_importance(args) -> int:
    try:
        rows = experiments.cmd_importance(args.run_dir, args.axis)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    units = sorted({r["unit"] for r in rows})
    for unit in units:
        accs = [r["accuracy"] for r in rows if r["unit"] == unit]
        print(f"{args.axis} {unit}: mean accuracy {np.mean(accs):.4f}")
    return EXIT_OK


def _cmd_attention_export(args) -> int:
    try:
        path = experiments.cmd_attention_export(args.run_dir)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_beta_sweep(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, "results/beta_sweep")
    rows = experiments.cmd_beta_sweep(cfg, out, betas=tuple(args.betas))
    for r in rows:
        print(
            f"beta {r['beta']:g} attention={'on' if r['attention'] else 'off'}: "
            f"accuracy {r['accuracy_fmt']}"
        )
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "import-csv": _cmd_import_csv,
    "featurize": _cmd_featurize,
    "topomap": _cmd_topomap,
    "run": _cmd_run,
    "robustness": _cmd_robustness,
    "importance": _cmd_importance,
    "attention-export": _cmd_attention_export,
    "beta-sweep": _cmd_beta_sweep,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
