from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import astuple, dataclass, fields
from pathlib import Path

CSV_HEADER = (
    "iteration,task,mean_reward,loss_ppo,loss_pretrain,statistical_parity,"
    "detection_seen,detection_unseen,wall_seconds"
)


@dataclass
class MetricsRow:
    iteration: int
    task: str
    mean_reward: float
    loss_ppo: float | None = None
    loss_pretrain: float | None = None
    statistical_parity: float | None = None
    detection_seen: float | None = None
    detection_unseen: float | None = None
    wall_seconds: float = 0.0

    def cells(self) -> list[str]:
        return ["" if v is None else repr(float(v)) if isinstance(v, float) else str(v) for v in astuple(self)]


assert ",".join(f.name for f in fields(MetricsRow)) == CSV_HEADER


def append_metrics(path, rows: list[MetricsRow] | MetricsRow) -> None:
    """Append rows to a metrics CSV, creating it with the header if needed. Write-temp-then-rename."""
    if isinstance(rows, MetricsRow):
        rows = [rows]
    path = Path(path)
    if path.exists():
        existing = path.read_text()
        if not existing.startswith(CSV_HEADER + "\n"):
            raise ValueError(f"{path}: header mismatch at byte 0")
    else:
        existing = CSV_HEADER + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for r in rows:
        writer.writerow(r.cells())
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as f:
        f.write(existing + buf.getvalue())
    os.replace(tmp, path)


def _cell(v: str, kind):
    if v == "":
        return None
    return kind(v)


def read_metrics(path) -> list[MetricsRow]:
    path = Path(path)
    text = path.read_text()
    if not text.startswith(CSV_HEADER + "\n"):
        raise ValueError(f"{path}: header mismatch at byte 0")
    rows = []
    for rec in csv.reader(io.StringIO(text[len(CSV_HEADER) + 1 :])):
        it, task, *nums = rec
        vals = [_cell(v, float) for v in nums]
        rows.append(MetricsRow(int(it), task, *vals[:-1], wall_seconds=vals[-1] or 0.0))
    return rows
