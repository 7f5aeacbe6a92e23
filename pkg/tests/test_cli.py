"""CLI integration: the file-driven pipeline, exit codes, fingerprint
checks, and lock behavior."""

import numpy as np
import pytest

from oodkit.cli import main
from oodkit.metrics import read_exits_csv, read_metrics_csv
from oodkit.scoring import (
    Method,
    Origin,
    ScoreRecord,
    read_scores_csv,
    read_thresholds,
    write_scores_csv,
)

CONFIG_TEMPLATE = """\
[paths]
manifest = {root}/synth/manifest.csv
model_dir = {root}/model
ensemble_dir = {root}/ensemble
output_dir = {root}/out

[model]
input_size = 16
channels = 4,6,8
exit_blocks = 1,2
exit_channels = 4
hidden = 8
classes = 3

[train]
epochs = 3
batch_size = 6
optimizer = adam
learning_rate = 0.002
seed = 7

[scoring]
method = energy
temperature = 0.001
quantile = 0.95

[ensemble]
members = 2
leave_out_min = 0.0
leave_out_max = 0.1
lr_min = 0.0005
lr_max = 0.002
epochs_min = 2
epochs_max = 4
batch_sizes = 8
master_seed = 13

[synth]
per_class_train = 6
per_class_calibrate = 7
per_class_test = 4
seed = 5
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.ini"
    config.write_text(CONFIG_TEMPLATE.format(root=root))
    assert main(["synth", "--config", str(config), "--out-dir", str(root / "synth")]) == 0
    assert main(["train", "--config", str(config)]) == 0
    return root, str(config)


def test_synth_writes_manifest_and_images(workspace):
    root, _ = workspace
    manifest = (root / "synth" / "manifest.csv").read_text().splitlines()
    assert manifest[0] == "path,label,split"
    assert len(manifest) == 1 + 3 * (6 + 7 + 4)
    assert (root / "synth" / "images").exists()


def test_train_writes_checkpoint_and_run_lock(workspace):
    root, _ = workspace
    assert (root / "model" / "checkpoint").exists()
    lock = (root / "model" / "run.lock").read_text()
    assert "command = train" in lock
    assert "model_fingerprint = " in lock
    assert "config.train.seed = 7" in lock


def test_train_rerun_reproduces_run_lock(workspace):
    root, config = workspace
    before = (root / "model" / "run.lock").read_bytes()
    assert main(["train", "--config", config]) == 0
    assert (root / "model" / "run.lock").read_bytes() == before


def test_missing_manifest_is_exit_2_with_path(tmp_path, capsys):
    config = tmp_path / "bad.ini"
    config.write_text(f"[paths]\nmanifest = {tmp_path}/nowhere.csv\nmodel_dir = {tmp_path}/m\n")
    assert main(["train", "--config", str(config)]) == 2
    assert "nowhere.csv" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline(workspace):
    root, config = workspace
    corrupted = root / "corrupted"
    cal_csv = root / "cal.csv"
    thresholds = root / "thresholds.txt"
    id_csv = root / "id.csv"
    ood_csv = root / "ood.csv"
    cls_csv = root / "cls.csv"
    eval_dir = root / "eval"
    assert main(["corrupt", "--config", config, "--split", "test", "--out-dir", str(corrupted)]) == 0
    assert (
        main(
            [
                "score", "--config", config, "--method", "energy",
                "--split", "calibrate", "--origin", "ID", "--out", str(cal_csv),
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "calibrate", "--config", config, "--scores", str(cal_csv),
                "--out", str(thresholds), "--model-dir", str(root / "model"),
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "score", "--config", config, "--method", "energy",
                "--split", "test", "--origin", "ID", "--out", str(id_csv),
                "--thresholds", str(thresholds), "--classification-out", str(cls_csv),
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "score", "--config", config, "--method", "energy",
                "--data", str(corrupted / "manifest.csv"), "--split", "test",
                "--origin", "OOD", "--out", str(ood_csv), "--thresholds", str(thresholds),
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "evaluate", "--id", str(id_csv), "--ood", str(ood_csv),
                "--set-name", "corrupted", "--out-dir", str(eval_dir),
            ]
        )
        == 0
    )
    return root, config, eval_dir


def test_corrupt_output_manifest(pipeline):
    root, _, _ = pipeline
    lines = (root / "corrupted" / "manifest.csv").read_text().splitlines()
    assert len(lines) == 1 + 3 * 4


def test_calibrate_produces_three_exit_thresholds(pipeline):
    root, _, _ = pipeline
    ts = read_thresholds(root / "thresholds.txt")
    assert len(ts.taus) == 3
    assert ts.method is Method.ENERGY
    assert ts.model_fingerprint != ""


def test_scores_have_exit_columns_and_margins(pipeline):
    root, _, _ = pipeline
    records = read_scores_csv(root / "id.csv")
    assert all(len(r.exit_scores) == 3 for r in records)
    assert all(r.origin is Origin.ID for r in records)
    # calibrated on ID data at q=0.95, so most ID test margins clear 0
    margins = [r.combined for r in records]
    assert np.mean(np.array(margins) >= 0) > 0.5


def test_evaluate_emits_metrics_roc_and_exits(pipeline):
    _, _, eval_dir = pipeline
    rows = read_metrics_csv(eval_dir / "metrics.csv")
    assert len(rows) == 1
    assert rows[0].method == "energy" and rows[0].ood_set == "corrupted"
    assert 0 <= rows[0].auc_pct <= 100
    assert (eval_dir / "roc_energy_corrupted.csv").exists()
    exits = read_exits_csv(eval_dir / "exits.csv")
    assert len(exits) == 1 and len(exits[0].auc_pct) == 3


def test_report_merges_and_prints_tables(pipeline, capsys, tmp_path):
    root, _, eval_dir = pipeline
    out = tmp_path / "report"
    assert (
        main(
            [
                "report", "--inputs", str(eval_dir),
                "--classification", str(root / "cls.csv"), "--out-dir", str(out),
            ]
        )
        == 0
    )
    assert (out / "metrics.csv").exists()
    assert (out / "classification.csv").exists()
    assert (out / "roc_energy_corrupted.csv").exists()
    stdout = capsys.readouterr().out
    assert "OOD detection" in stdout and "energy" in stdout


def test_method_mismatch_with_thresholds_is_exit_2(pipeline, capsys):
    root, config, _ = pipeline
    code = main(
        [
            "score", "--config", config, "--method", "softmax", "--split", "test",
            "--origin", "ID", "--out", str(root / "x.csv"),
            "--thresholds", str(root / "thresholds.txt"),
        ]
    )
    assert code == 2
    assert "calibrated for method" in capsys.readouterr().err


def test_model_fingerprint_mismatch_is_exit_2(pipeline, capsys):
    root, config, _ = pipeline
    tampered = root / "tampered.txt"
    text = (root / "thresholds.txt").read_text()
    lines = [
        "model_fingerprint = " + "0" * 64 if line.startswith("model_fingerprint") else line
        for line in text.splitlines()
    ]
    tampered.write_text("\n".join(lines) + "\n")
    code = main(
        [
            "score", "--config", config, "--method", "energy", "--split", "test",
            "--origin", "ID", "--out", str(root / "y.csv"), "--thresholds", str(tampered),
        ]
    )
    assert code == 2
    assert "different model" in capsys.readouterr().err


def test_evaluate_rejects_mixed_methods(pipeline, tmp_path, capsys):
    _, _, _ = pipeline
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    write_scores_csv(a, [ScoreRecord("s", Method.SOFTMAX, 1.0, Origin.ID)])
    write_scores_csv(b, [ScoreRecord("t", Method.ENERGY, 0.0, Origin.OOD)])
    assert main(["evaluate", "--id", str(a), "--ood", str(b), "--set-name", "x", "--out-dir", str(tmp_path / "e")]) == 2
    assert "method" in capsys.readouterr().err


def test_evaluate_perfect_separation_fixture(tmp_path):
    id_csv = tmp_path / "id.csv"
    ood_csv = tmp_path / "ood.csv"
    write_scores_csv(
        id_csv, [ScoreRecord(f"i{k}", Method.SOFTMAX, 5.0 + k, Origin.ID) for k in range(30)]
    )
    write_scores_csv(
        ood_csv, [ScoreRecord(f"o{k}", Method.SOFTMAX, -5.0 - k, Origin.OOD) for k in range(30)]
    )
    out = tmp_path / "eval"
    assert main(["evaluate", "--id", str(id_csv), "--ood", str(ood_csv), "--set-name", "p", "--out-dir", str(out)]) == 0
    row = read_metrics_csv(out / "metrics.csv")[0]
    assert row.auc_pct == 100.0
    assert row.fpr95_pct == 0.0


def test_locked_output_dir_refused(workspace, capsys, tmp_path):
    root, config = workspace
    out = tmp_path / "busy"
    out.mkdir()
    (out / ".lock").touch()
    code = main(["corrupt", "--config", config, "--split", "test", "--out-dir", str(out)])
    assert code == 2
    assert "in use" in capsys.readouterr().err


def test_train_ensemble_and_ensemble_scoring(workspace, tmp_path):
    root, config = workspace
    assert main(["train-ensemble", "--config", config]) == 0
    assert (root / "ensemble" / "ensemble.manifest").exists()
    assert (root / "ensemble" / "member_0" / "checkpoint").exists()
    lock = (root / "ensemble" / "run.lock").read_text()
    assert "ensemble_fingerprint = " in lock
    out_csv = tmp_path / "ens.csv"
    assert (
        main(
            [
                "score", "--config", config, "--method", "ensemble-weighted",
                "--split", "test", "--origin", "ID", "--out", str(out_csv),
            ]
        )
        == 0
    )
    records = read_scores_csv(out_csv)
    assert all(r.method is Method.ENSEMBLE_WEIGHTED for r in records)
    assert all(r.exit_scores == () for r in records)
    assert all(r.combined <= 0 for r in records)  # negated uncertainty


def test_unknown_subcommand_is_exit_2(capsys):
    assert main(["frobnicate"]) == 2
