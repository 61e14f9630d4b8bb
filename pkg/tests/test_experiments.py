import json
from pathlib import Path

import numpy as np
import pytest

from cogload import experiments
from cogload.cli import main
from cogload.experiments import RunConfig, config_text, parse_config_text, train_config

TINY_ARGS = [
    "--synthetic", "--subjects", "3", "--segments", "4",
    "--epochs", "2", "--batch-size", "8", "--lr", "0.001",
]


def test_config_round_trip():
    cfg = RunConfig(subjects=4, epochs=7, lr=5e-4, no_oc=True, features="de")
    parsed = parse_config_text(config_text(cfg))
    assert parsed == cfg


def test_config_rejects_unknown_key():
    with pytest.raises(ValueError, match="unknown config key"):
        parse_config_text("bogus=1\n")


def test_config_comments_and_blank_lines():
    cfg = parse_config_text("# comment\n\nsubjects=9  # trailing\n")
    assert cfg.subjects == 9


def test_config_conflicting_streams_rejected():
    with pytest.raises(ValueError):
        RunConfig(raw_only=True, topo_only=True)


def test_train_config_ablation_semantics():
    assert train_config(RunConfig(no_oc=True)).beta == 0.0
    assert not train_config(RunConfig(no_attention=True)).attention
    raw = train_config(RunConfig(raw_only=True))
    assert raw.streams == ("raw",) and raw.beta == 0.0 and not raw.attention
    topo = train_config(RunConfig(topo_only=True))
    assert topo.streams == ("topo",)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["--seed", "0", "--out", str(out), "run", *TINY_ARGS])
    assert code == 0
    return Path(out)


def test_run_outputs(tiny_run):
    assert (tiny_run / "config.txt").exists()
    summary = json.loads((tiny_run / "summary.json").read_text())
    assert summary["n_folds"] == 3
    for s in ("S00", "S01", "S02"):
        assert (tiny_run / f"fold_{s}.json").exists()
        assert (tiny_run / f"ckpt_{s}.ckpt").exists()
        assert (tiny_run / f"embeddings_{s}.tsv").exists()
        assert (tiny_run / f"gates_{s}.tsv").exists()
    fold = json.loads((tiny_run / "fold_S00.json").read_text())
    assert len(fold["epoch_log"]) == 2
    assert len(fold["scores"]) == 4


def test_run_determinism(tmp_path):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert main(["--seed", "3", "--out", str(out_a), "run", *TINY_ARGS]) == 0
    assert main(["--seed", "3", "--out", str(out_b), "run", *TINY_ARGS]) == 0
    for name in ["summary.json", "summary.tsv", "fold_S00.json", "fold_S01.json",
                 "fold_S02.json", "config.txt"]:
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), name


def test_robustness_fraction_zero_bit_equals_clean(tiny_run):
    code = main(["robustness", "--run", str(tiny_run), "--fractions", "0.1", "0.3",
                 "0.5", "0.7"])
    assert code == 0
    rows = json.loads((tiny_run / "robustness.json").read_text())
    fractions = sorted({r["fraction"] for r in rows})
    assert fractions == [0.0, 0.1, 0.3, 0.5, 0.7]
    for subject in ("S00", "S01", "S02"):
        clean = json.loads((tiny_run / f"fold_{subject}.json").read_text())["metrics"]
        zero_row = next(
            r for r in rows if r["subject"] == subject and r["fraction"] == 0.0
        )
        assert zero_row["accuracy"] == clean["accuracy"]
        assert zero_row["f1"] == clean["f1"]


def test_importance_cardinality(tiny_run):
    assert main(["importance", "--run", str(tiny_run), "--axis", "channel"]) == 0
    rows = json.loads((tiny_run / "importance_channel.json").read_text())
    assert len({r["unit"] for r in rows}) == 4
    assert main(["importance", "--run", str(tiny_run), "--axis", "band"]) == 0
    rows = json.loads((tiny_run / "importance_band.json").read_text())
    assert len({r["unit"] for r in rows}) == 5


def test_attention_export(tiny_run):
    assert main(["attention-export", "--run", str(tiny_run)]) == 0
    lines = (tiny_run / "attention_gates.tsv").read_text().splitlines()
    header = lines[0].split("\t")
    assert header[:3] == ["subject", "window", "label"]
    assert header[-1] == "mean_gate"
    assert len(header) == 3 + 256 + 1
    assert len(lines) - 1 == 12  # one row per test sample
    values = np.array([float(v) for v in lines[1].split("\t")[3:-1]])
    assert np.all((values > 0.0) & (values < 1.0))


def test_exit_codes(tmp_path):
    # conflicting flags -> usage error
    assert main(["--out", str(tmp_path / "x"), "run", "--synthetic", "--raw-only",
                 "--topo-only", "--epochs", "1"]) == 2
    # missing dataset -> data error
    assert main(["--out", str(tmp_path / "y"), "run", "--data",
                 str(tmp_path / "missing")]) == 3
    # missing run dir -> usage error
    assert main(["robustness", "--run", str(tmp_path / "nope")]) == 2


def test_cli_synth_featurize_topomap(tmp_path):
    ds = tmp_path / "ds"
    assert main(["--seed", "1", "--out", str(ds), "synth", "--subjects", "2",
                 "--segments", "2"]) == 0
    assert (ds / "S00" / "recording.f32le").exists()
    assert (ds / "S00" / "labels.tsv").exists()

    feat_dir = tmp_path / "features"
    assert main(["--out", str(feat_dir), "featurize", "--data", str(ds)]) == 0
    lines = (feat_dir / "features.tsv").read_text().splitlines()
    assert len(lines) == 1 + 4
    assert len(lines[1].split("\t")) == 3 + 20

    maps_dir = tmp_path / "maps"
    assert main(["--out", str(maps_dir), "topomap", "--data", str(ds)]) == 0
    tensor = np.fromfile(maps_dir / "S00" / "0.f32le", dtype="<f4")
    assert tensor.size == 32 * 32 * 15
    assert (maps_dir / "S00" / "0_alpha.ppm").exists()


def test_cli_import_csv(tmp_path):
    csv_path = tmp_path / "rec.csv"
    fs = 256.0
    rows = ["t,ch1,ch2,ch3,ch4"]
    for i in range(512):
        rows.append(f"{i / fs},0.1,0.2,0.3,0.4")
    csv_path.write_text("\n".join(rows) + "\n")
    out = tmp_path / "ds"
    assert main(["--out", str(out), "import-csv", str(csv_path), "--subject", "P1"]) == 0
    assert (out / "P1" / "recording.f32le").exists()


def test_beta_sweep_structure(tmp_path):
    out = tmp_path / "sweep"
    code = main(["--seed", "2", "--out", str(out), "beta-sweep", *TINY_ARGS,
                 "--betas", "0.4", "1.0"])
    assert code == 0
    rows = json.loads((out / "beta_sweep.json").read_text())
    assert len(rows) == 4  # 2 betas x attention on/off
    assert all(r["seed"] == 2 for r in rows)
    assert {(r["beta"], r["attention"]) for r in rows} == {
        (0.4, True), (1.0, True), (0.4, False), (1.0, False)
    }
