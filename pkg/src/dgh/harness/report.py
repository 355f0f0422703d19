"""Append-only experiment reports, written as RFC-4180 CSV."""
from __future__ import annotations

import csv
import io
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..io_utils import atomic_write_text

COLUMNS = ("experiment", "seed", "method", "scheme", "metric", "value", "config_hash")


@dataclass(frozen=True)
class Row:
    experiment: str
    seed: int
    method: str
    scheme: str
    metric: str
    value: float


@dataclass
class Report:
    config_hash: str
    rows: list[Row] = field(default_factory=list)

    def add(self, experiment: str, seed: int, method: str, scheme: str, metric: str, value: float) -> Row:
        row = Row(experiment, int(seed), method, scheme, metric, float(value))
        self.rows.append(row)
        return row

    def extend(self, other: "Report") -> None:
        if other.config_hash != self.config_hash:
            raise ValueError("cannot merge reports of different configs")
        self.rows.extend(other.rows)

    def select(self, **match) -> list[Row]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]

    def values(self, **match) -> np.ndarray:
        return np.array([r.value for r in self.select(**match)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([r.experiment, r.seed, r.method, r.scheme, r.metric, repr(r.value), self.config_hash])
        return buf.getvalue()

    def metadata(self) -> dict:
        return {"config_hash": self.config_hash, "package_version": __version__,
                "numpy_version": np.__version__, "python_version": platform.python_version(),
                "rows": len(self.rows)}

    def write(self, path) -> Path:
        """Atomically write ``path`` (CSV) and a ``.meta.json`` sidecar."""
        path = Path(path)
        atomic_write_text(path, self.to_csv())
        atomic_write_text(path.with_suffix(".meta.json"), json.dumps(self.metadata(), indent=2, sort_keys=True))
        return path


def read_report(path) -> Report:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != COLUMNS:
        raise ValueError(f"{path}: not a report (expected header {COLUMNS})")
    hashes = {r[6] for r in rows[1:]}
    if len(hashes) > 1:
        raise ValueError(f"{path}: rows from several configs {sorted(hashes)}")
    rep = Report(hashes.pop() if hashes else "")
    for r in rows[1:]:
        rep.add(r[0], int(r[1]), r[2], r[3], r[4], float(r[5]))
    return rep
