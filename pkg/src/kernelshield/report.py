"""CSV and markdown serialisation of a :class:`~kernelshield.experiment.ResultsTable`.

The CSV header is ``system,training,scenario,layers,clean`` followed by one
column per attack label.  Accuracies are written as shortest round-trip
floats so that :func:`read_csv` restores the table exactly.  Wall-clock time
is never written, so reports of identical runs are byte-identical.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Optional, TextIO, Union

from .experiment import ResultsRow, ResultsTable

FIXED_COLUMNS = ("system", "training", "scenario", "layers", "clean")
FORMATS = ("csv", "markdown")


class ReportError(ValueError):
    pass


def header(table: ResultsTable) -> list:
    return list(FIXED_COLUMNS) + list(table.attack_labels)


def _cell(v) -> str:
    return "" if v is None else repr(float(v))


def write_csv(table: ResultsTable, stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\r\n")
    writer.writerow(header(table))
    for r in table.rows:
        writer.writerow([r.system, r.training, r.scenario, r.layers, _cell(r.clean)]
                        + [_cell(r.attacks.get(a)) for a in table.attack_labels])


def to_csv(table: ResultsTable) -> str:
    buf = io.StringIO(newline="")
    write_csv(table, buf)
    return buf.getvalue()


def read_csv(text: str) -> ResultsTable:
    rows = list(csv.reader(io.StringIO(text, newline="")))
    if not rows:
        raise ReportError("empty CSV: missing header row")
    head = rows[0]
    if tuple(head[:len(FIXED_COLUMNS)]) != FIXED_COLUMNS:
        raise ReportError(f"unexpected header {head}")
    labels = tuple(head[len(FIXED_COLUMNS):])
    table = ResultsTable(labels)
    for lineno, rec in enumerate(rows[1:], start=2):
        if len(rec) != len(head):
            raise ReportError(f"line {lineno}: {len(rec)} fields, expected {len(head)}")
        try:
            attacks = {a: float(v) for a, v in zip(labels, rec[len(FIXED_COLUMNS):]) if v != ""}
            table.rows.append(ResultsRow(rec[0], rec[1], rec[2], rec[3], float(rec[4]), attacks))
        except ValueError as exc:
            raise ReportError(f"line {lineno}: {exc}") from exc
    return table


def to_markdown(table: ResultsTable) -> str:
    head = ["Network & Defense", "Training", "Scenario", "Layers", "Clean"] + list(table.attack_labels)
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join(["---"] * len(head)) + "|"]
    for r in table.rows:
        vals = [f"{r.clean:.1f}"] + [
            "-" if r.attacks.get(a) is None else f"{r.attacks[a]:.1f}" for a in table.attack_labels]
        lines.append("| " + " | ".join([r.system, r.training, r.scenario, r.layers] + vals) + " |")
    meta = table.metadata
    notes = []
    if "count" in meta:
        notes.append(f"images per cell: {meta['count']}")
    if "seed" in meta:
        notes.append(f"seed: {meta['seed']}")
    if meta.get("config_hash"):
        notes.append(f"config hash: {meta['config_hash']}")
    text = "\n".join(lines) + "\n"
    if notes:
        text += "\nAccuracies in %. " + "; ".join(notes) + "\n"
    return text


def render(table: ResultsTable, fmt: str) -> str:
    if fmt == "csv":
        return to_csv(table)
    if fmt == "markdown":
        return to_markdown(table)
    raise ReportError(f"unknown report format {fmt!r}; expected one of {FORMATS}")


def report(table: ResultsTable, fmt: str, path: Optional[Union[str, Path]] = None) -> str:
    """Render ``table`` and, if ``path`` is given, write it there."""
    text = render(table, fmt)
    if path is not None:
        Path(path).write_text(text, newline="")
    return text
