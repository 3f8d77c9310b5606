"""
Append-only JSON-lines result files and run summaries.

One JSON object per line, keys sorted. A record id may appear more than
once (an evaluation record followed later by its fine-tuned version); the
last line for an id wins.
"""
import json
import logging
import os
import threading
from datetime import datetime, timezone
from pathlib import Path

from modules.errors import DataFormatError

logger = logging.getLogger(__name__)


def dumps(record):
    return json.dumps(record, sort_keys=True, allow_nan=True)


def _drop_partial_tail(path):
    """Cut a partial last line left by a writer that was killed mid-line."""
    if not path.exists() or path.stat().st_size == 0:
        return
    with path.open("rb+") as f:
        f.seek(-1, os.SEEK_END)
        if f.read(1) == b"\n":
            return
        f.seek(0)
        raw = f.read()
        keep = raw.rfind(b"\n") + 1
        try:
            json.loads(raw[keep:])
        except ValueError:
            f.truncate(keep)
            logger.warning("%s: dropped %d bytes of a partial last line", path, len(raw) - keep)
        else:
            # complete record, only the newline is missing
            f.write(b"\n")


def append_jsonl(path, record):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _drop_partial_tail(path)
    with path.open("a", encoding="utf-8") as f:
        f.write(dumps(record) + "\n")


class ResultsStore:
    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, record):
        if "id" not in record:
            raise ValueError("records need an 'id' field")
        with self._lock:
            append_jsonl(self.path, record)

    def _lines(self):
        if not self.path.exists():
            return []
        return self.path.read_text(encoding="utf-8").splitlines()

    def load_records(self):
        """{id: record} keeping the last line per id, in first-seen order."""
        records = {}
        lines = self._lines()
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                if n == len(lines):
                    # a run killed mid-write leaves a partial last line
                    logger.warning("%s: ignoring truncated last line", self.path)
                    continue
                raise DataFormatError(f"{self.path}:{n}: {e}") from e
            records[record["id"]] = record
        return records


def save_run_summary(out_dir, command, records, extra=None):
    """Aggregate candidate records into run_summary.json beside the results."""
    evaluated = [r for r in records if r.get("acc_adaptive") is not None]
    finetuned = [r for r in records if r.get("acc_finetuned") is not None]

    def _mean(values):
        values = [v for v in values if v is not None]
        return round(sum(values) / len(values), 6) if values else None

    per_constraint = {}
    for r in records:
        label = r.get("constraint", "unconstrained")
        group = per_constraint.setdefault(label, {"candidates": 0, "finetuned": 0})
        group["candidates"] += 1
        if r.get("acc_finetuned") is not None:
            group["finetuned"] += 1

    summary = {
        "command": command,
        "candidates": len(records),
        "evaluated": len(evaluated),
        "finetuned": len(finetuned),
        "mean_acc_adaptive": _mean(r.get("acc_adaptive") for r in records),
        "mean_acc_vanilla": _mean(r.get("acc_vanilla") for r in records),
        "mean_acc_finetuned": _mean(r.get("acc_finetuned") for r in records),
        "per_constraint": per_constraint,
    }
    if extra:
        summary.update(extra)

    path = Path(out_dir) / "run_summary.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def write_run_meta(out_dir, command, started_at, argv):
    """Write run_meta.json, the only output that carries timestamps."""
    finished_at = datetime.now(timezone.utc)
    meta = {
        "command": command,
        "argv": list(argv),
        "started_at": started_at.isoformat(),
        "finished_at": finished_at.isoformat(),
        "seconds": round((finished_at - started_at).total_seconds(), 3),
    }
    path = Path(out_dir) / "run_meta.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta
