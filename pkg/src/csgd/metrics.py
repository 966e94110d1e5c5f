"""Append-only CSV metrics log and JSON run summaries."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

HEADER = ("epoch", "step", "loss", "accuracy", "chi", "phi", "lr", "seconds")


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    step: int
    loss: float = math.nan
    accuracy: float = math.nan
    chi: float = math.nan
    phi: float = math.nan
    lr: float = math.nan
    seconds: float = 0.0


class MetricsLog:
    """Records kept in memory and, when ``path`` is set, streamed to CSV."""

    def __init__(self, path=None):
        self.records: list[MetricsRecord] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(HEADER)

    def append(self, record: MetricsRecord) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(getattr(record, k)) for k in HEADER])

    def log(self, **values) -> MetricsRecord:
        rec = MetricsRecord(**values)
        self.append(rec)
        return rec

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.records)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def read_metrics(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        types = {f.name: f.type for f in fields(MetricsRecord)}
        out = []
        for row in reader:
            vals = {k: (int(v) if types[k] in ("int", int) else float(v)) for k, v in zip(HEADER, row)}
            out.append(MetricsRecord(**vals))
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, MetricsRecord):
        return asdict(x)
    return x


def write_summary(path, summary: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True))
    return path


def read_summary(path) -> dict:
    return json.loads(Path(path).read_text())
