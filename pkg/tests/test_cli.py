import json

import pandas as pd
import pytest

import main
from modules import search
from modules.checkpoint import load_checkpoint, save_checkpoint
from modules.config import (
    BN_DISTANCE_COLUMNS,
    CANDIDATE_CSV_COLUMNS,
    HISTOGRAM_COLUMNS,
    REPORT_COLUMNS,
    load_experiment_config,
)
from modules.store import ResultsStore

BLOBS_TOML = """
seed = 0

[dataset]
kind = "blobs"
blob_classes = 3
blob_per_class = 40
blob_test_per_class = 10
blob_image_size = 8

[model]
architecture = "micro-cnn"
widths = [4, 4]

[train]
epochs = 2
batch_size = 16

[finetune]
epochs = 1
batch_size = 16

[search]
candidate_count = 4
recalib_iterations = 3
subval_fraction = 0.25
recalib_fraction = 0.25
top_k_to_finetune = 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "blobs.toml"
    config.write_text(BLOBS_TOML)
    assert main.main(["--config", str(config), "--out-dir", str(root / "train"), "train"]) == 0
    assert main.main(["--config", str(config), "--out-dir", str(root / "search"), "search",
                      "--checkpoint", str(root / "train" / "model.egck")]) == 0
    return root, config


def run(workspace, name, *args):
    root, config = workspace
    return main.main(["--config", str(config), "--out-dir", str(root / name), *args])


def test_train_outputs(workspace):
    root, _ = workspace
    out = root / "train"
    lines = (out / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(line)["epoch"] for line in lines] == [1, 2]
    ckpt = load_checkpoint(out / "model.egck")
    assert ckpt.spec.class_count == 3
    assert (out / "config.resolved.json").exists()
    assert json.loads((out / "run_meta.json").read_text())["command"] == "train"


def test_eval_reports_accuracy(workspace, capsys):
    root, _ = workspace
    assert run(workspace, "eval", "eval", "--checkpoint", str(root / "train" / "model.egck")) == 0
    summary = json.loads((root / "eval" / "run_summary.json").read_text())
    assert summary["split"] == "test"
    assert 0.0 <= summary["accuracy"] <= 1.0
    assert "Accuracy on test" in capsys.readouterr().out


def test_search_outputs(workspace):
    root, _ = workspace
    out = root / "search"
    table = pd.read_csv(out / "candidates.csv")
    assert list(table.columns) == CANDIDATE_CSV_COLUMNS
    assert sorted(table["id"]) == ["c0000", "c0001", "c0002", "c0003"]
    records = ResultsStore(out / "candidates.jsonl").load_records()
    assert set(records) == {"c0000", "c0001", "c0002", "c0003"}
    tuned = [r for r in records.values() if r["acc_finetuned"] is not None]
    assert len(tuned) == 1
    assert (out / tuned[0]["checkpoint"]).exists()
    summary = json.loads((out / "run_summary.json").read_text())
    assert summary["winner"] == tuned[0]["id"]
    assert "winner_test_acc" in summary


def test_search_resume_reuses_results(workspace):
    root, _ = workspace
    before = (root / "search" / "candidates.jsonl").read_text()
    assert run(workspace, "search", "search", "--checkpoint", str(root / "train" / "model.egck")) == 0
    assert (root / "search" / "candidates.jsonl").read_text() == before


def test_search_is_byte_reproducible(workspace):
    root, _ = workspace
    assert run(workspace, "search-again", "search", "--checkpoint", str(root / "train" / "model.egck")) == 0
    for name in ("candidates.jsonl", "candidates.csv", "scatter.csv"):
        assert (root / "search-again" / name).read_bytes() == (root / "search" / name).read_bytes()


def test_finetune_writes_histograms(workspace):
    root, _ = workspace
    records = ResultsStore(root / "search" / "candidates.jsonl").load_records()
    winner = next(r for r in records.values() if r["checkpoint"])
    pruned = root / "search" / winner["checkpoint"]
    assert run(workspace, "finetune", "finetune", "--checkpoint", str(pruned)) == 0
    hist = pd.read_csv(root / "finetune" / "histograms.csv")
    assert list(hist.columns) == HISTOGRAM_COLUMNS
    assert sorted(hist["epoch"].unique().tolist()) == [0, 1]
    ckpt = load_checkpoint(pruned)
    per_epoch = hist[hist["epoch"] == 0].groupby("layer")["count"].sum()
    for i, total in per_epoch.items():
        assert total == ckpt.params.weights[i].size
    assert (root / "finetune" / "finetuned.egck").exists()


def test_bn_distance(workspace):
    root, _ = workspace
    records = ResultsStore(root / "search" / "candidates.jsonl").load_records()
    winner = next(r for r in records.values() if r["checkpoint"])
    assert run(workspace, "bn", "bn-distance", "--full", str(root / "train" / "model.egck"),
               "--pruned", str(root / "search" / winner["checkpoint"])) == 0
    table = pd.read_csv(root / "bn" / "bn_distance.csv")
    assert list(table.columns) == BN_DISTANCE_COLUMNS
    assert (table.drop(columns=["layer", "channel"]) >= 0).all().all()


def test_correlate_finetunes_the_rest(workspace, tmp_path):
    root, _ = workspace
    candidates = tmp_path / "candidates.jsonl"
    candidates.write_text((root / "search" / "candidates.jsonl").read_text())
    assert run(workspace, "correlate", "correlate", "--candidates", str(candidates),
               "--checkpoint", str(root / "train" / "model.egck")) == 0
    report = pd.read_csv(root / "correlate" / "correlation.csv")
    assert list(report.columns) == REPORT_COLUMNS
    assert report["constraint"].tolist() == ["unconstrained"]
    assert report["n"].tolist() == [4]
    assert all(r["acc_finetuned"] is not None for r in ResultsStore(candidates).load_records().values())
    lift = json.loads((root / "correlate" / "lift.json").read_text())
    assert "topk_agreement_adaptive" in lift["unconstrained"]


def test_correlate_without_checkpoint_needs_finetuned_records(workspace, tmp_path):
    root, _ = workspace
    candidates = tmp_path / "candidates.jsonl"
    candidates.write_text((root / "search" / "candidates.jsonl").read_text())
    assert run(workspace, "correlate-bad", "correlate", "--candidates", str(candidates)) == 1


def test_missing_dataset_file_exits_3(tmp_path):
    config = tmp_path / "mnist.toml"
    config.write_text(f'[dataset]\nkind = "mnist"\ntrain_images = "{tmp_path / "no-images"}"\n'
                      f'train_labels = "{tmp_path / "no-labels"}"\n')
    assert main.main(["--config", str(config), "--out-dir", str(tmp_path / "out"), "train"]) == 3


def test_unknown_config_key_exits_2(tmp_path, capsys):
    config = tmp_path / "bad.toml"
    config.write_text("[search]\nwidget = 1\n")
    assert main.main(["--config", str(config), "--out-dir", str(tmp_path / "out"), "train"]) == 2
    assert "widget" in capsys.readouterr().err


def test_unreachable_target_exits_2(workspace):
    root, _ = workspace
    assert run(workspace, "infeasible", "search", "--checkpoint", str(root / "train" / "model.egck"),
               "--target", "0.01") == 2


def test_bad_worker_count_exits_2(tmp_path):
    assert main.main(["--workers", "0", "--out-dir", str(tmp_path), "train"]) == 2


@pytest.mark.parametrize("target", ["half", "0", "1.5"])
def test_bad_target_exits_2(workspace, target):
    root, _ = workspace
    assert run(workspace, "bad-target", "search", "--checkpoint", str(root / "train" / "model.egck"),
               "--target", target) == 2


def test_missing_candidates_file_exits_3(workspace, tmp_path):
    assert run(workspace, "correlate-missing", "correlate", "--candidates", str(tmp_path / "nope.jsonl")) == 3


def test_search_killed_mid_write_resumes_and_correlates(workspace, monkeypatch):
    root, _ = workspace
    lines = (root / "search" / "candidates.jsonl").read_text().splitlines(keepends=True)
    assert [json.loads(line)["id"] for line in lines[:3]] == ["c0000", "c0001", "c0002"]
    out = root / "killed"
    out.mkdir()
    (out / "candidates.jsonl").write_text(lines[0] + lines[1] + lines[2][:len(lines[2]) // 2])

    evaluated = []
    evaluate = search.evaluate_candidate

    def tracking(spec, params, record, *args, **kwargs):
        evaluated.append(record.id)
        return evaluate(spec, params, record, *args, **kwargs)

    monkeypatch.setattr(search, "evaluate_candidate", tracking)
    checkpoint = str(root / "train" / "model.egck")
    assert run(workspace, "killed", "search", "--checkpoint", checkpoint) == 0
    assert evaluated == ["c0002", "c0003"]
    assert (out / "candidates.csv").read_bytes() == (root / "search" / "candidates.csv").read_bytes()
    assert set(ResultsStore(out / "candidates.jsonl").load_records()) == {"c0000", "c0001", "c0002", "c0003"}

    assert run(workspace, "killed-correlate", "correlate", "--candidates", str(out / "candidates.jsonl"),
               "--checkpoint", checkpoint) == 0
    report = pd.read_csv(root / "killed-correlate" / "correlation.csv")
    assert report["n"].tolist() == [4]


def test_bn_distance_accepts_an_unpruned_checkpoint(workspace):
    root, _ = workspace
    model = str(root / "train" / "model.egck")
    assert run(workspace, "bn-self", "bn-distance", "--full", model, "--pruned", model) == 0
    table = pd.read_csv(root / "bn-self" / "bn_distance.csv")
    ckpt = load_checkpoint(root / "train" / "model.egck")
    assert len(table) == sum(len(state.gamma) for state in ckpt.params.bn.values())


def test_bn_distance_of_a_model_holding_true_statistics_has_zero_global_columns(workspace):
    root, config = workspace
    cfg = load_experiment_config(config)
    ckpt = load_checkpoint(root / "train" / "model.egck")
    truth = search.true_bn_stats(ckpt.spec, ckpt.params, main.report_split(main.load_data(cfg)), cfg.train.batch_size)
    model = root / "true-stats.egck"
    save_checkpoint(model, ckpt.spec, truth)
    assert run(workspace, "bn-zero", "bn-distance", "--full", str(model), "--pruned", str(model)) == 0
    table = pd.read_csv(root / "bn-zero" / "bn_distance.csv")
    assert len(table) == sum(len(state.gamma) for state in truth.bn.values())
    assert (table["dmean_global"].abs() <= 1e-6).all()
    assert (table["dvar_global"].abs() <= 1e-6).all()
