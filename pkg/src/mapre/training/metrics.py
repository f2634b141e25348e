"""JSON-lines metrics sink shared by training and evaluation."""

from __future__ import annotations

import json
import math
import threading
from pathlib import Path


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


class MetricsLogger:
    """Append-only JSONL writer; writes are serialized with a lock.

    With ``path=None`` records are only kept in memory.
    """

    def __init__(self, path=None, header: dict | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")
        if header is not None:
            self.log(dict(header, kind="config"))

    def log(self, record: dict) -> None:
        rec = {k: _clean(v) for k, v in record.items()}
        line = json.dumps(rec, sort_keys=True)
        with self._lock:
            self.records.append(rec)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
