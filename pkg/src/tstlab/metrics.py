"""Line-delimited JSON metrics records."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional


@dataclass
class MetricsRecord:
    step: int
    phase: str
    loss_kind: str
    loss: float
    learning_rate: float
    data_tokens_seen: int
    wallclock: float
    grad_norm: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class MetricsLog:
    """Append-only writer; each record is a single ``write`` of one line."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fd = os.open(self.path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)

    def write(self, record) -> None:
        line = record.to_json() if hasattr(record, "to_json") else json.dumps(record, sort_keys=True)
        os.write(self._fd, (line + "\n").encode())

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def without_wallclock(records: Iterable[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k != "wallclock"} for r in records]
