import json
import math
from datetime import datetime, timezone

import pytest

from modules.errors import DataFormatError
from modules.store import ResultsStore, append_jsonl, save_run_summary, write_run_meta


def test_last_line_per_id_wins(tmp_path):
    store = ResultsStore(tmp_path / "candidates.jsonl")
    store.append({"id": "c0000", "acc_adaptive": 0.4})
    store.append({"id": "c0001", "acc_adaptive": 0.3})
    store.append({"id": "c0000", "acc_adaptive": 0.4, "acc_finetuned": 0.7})
    records = store.load_records()
    assert list(records) == ["c0000", "c0001"]
    assert records["c0000"]["acc_finetuned"] == 0.7


def test_lines_have_sorted_keys(tmp_path):
    store = ResultsStore(tmp_path / "r.jsonl")
    store.append({"id": "c0000", "b": 1, "a": 2})
    assert store.path.read_text() == '{"a": 2, "b": 1, "id": "c0000"}\n'


def test_records_need_an_id(tmp_path):
    with pytest.raises(ValueError):
        ResultsStore(tmp_path / "r.jsonl").append({"acc": 1.0})


def test_missing_file_is_empty(tmp_path):
    assert ResultsStore(tmp_path / "none.jsonl").load_records() == {}


def test_truncated_last_line_is_ignored(tmp_path):
    path = tmp_path / "r.jsonl"
    path.write_text('{"id": "c0000", "acc_adaptive": 0.5}\n{"id": "c00')
    assert list(ResultsStore(path).load_records()) == ["c0000"]


def test_corrupt_middle_line_raises(tmp_path):
    path = tmp_path / "r.jsonl"
    path.write_text('{"id": "c0000"}\nnot json\n{"id": "c0001"}\n')
    with pytest.raises(DataFormatError):
        ResultsStore(path).load_records()


def test_nan_values_survive(tmp_path):
    store = ResultsStore(tmp_path / "r.jsonl")
    store.append({"id": "c0000", "x": math.nan})
    assert math.isnan(store.load_records()["c0000"]["x"])


def test_append_after_a_killed_write_drops_the_partial_line(tmp_path):
    path = tmp_path / "r.jsonl"
    path.write_text('{"acc_adaptive": 0.4, "id": "c0000"}\n{"acc_adaptive": 0.4, "id": "c00')
    store = ResultsStore(path)
    store.append({"id": "c0001", "acc_adaptive": 0.4})
    assert path.read_text().splitlines() == [
        '{"acc_adaptive": 0.4, "id": "c0000"}',
        '{"acc_adaptive": 0.4, "id": "c0001"}',
    ]
    assert list(store.load_records()) == ["c0000", "c0001"]


def test_append_keeps_a_complete_line_missing_its_newline(tmp_path):
    path = tmp_path / "r.jsonl"
    path.write_text('{"id": "c0000"}')
    append_jsonl(path, {"id": "c0001"})
    assert path.read_text() == '{"id": "c0000"}\n{"id": "c0001"}\n'


def test_partial_only_line_is_dropped(tmp_path):
    path = tmp_path / "r.jsonl"
    path.write_text('{"id": "c0')
    append_jsonl(path, {"id": "c0001"})
    assert path.read_text() == '{"id": "c0001"}\n'


def test_run_summary(tmp_path):
    records = [
        {"id": "c0000", "acc_adaptive": 0.5, "acc_vanilla": 0.1, "acc_finetuned": 0.8, "constraint": "50%"},
        {"id": "c0001", "acc_adaptive": 0.3, "acc_vanilla": 0.2, "acc_finetuned": None, "constraint": "50%"},
    ]
    summary = save_run_summary(tmp_path, "search", records, {"winner": "c0000"})
    assert summary["candidates"] == 2 and summary["finetuned"] == 1
    assert summary["mean_acc_adaptive"] == 0.4
    assert summary["per_constraint"] == {"50%": {"candidates": 2, "finetuned": 1}}
    assert json.loads((tmp_path / "run_summary.json").read_text())["winner"] == "c0000"


def test_run_meta(tmp_path):
    started = datetime(2026, 1, 1, tzinfo=timezone.utc)
    meta = write_run_meta(tmp_path, "train", started, ["train", "--seed", "1"])
    assert meta["argv"] == ["train", "--seed", "1"]
    assert json.loads((tmp_path / "run_meta.json").read_text())["started_at"].startswith("2026-01-01")
