"""Versioned CSV tables.

Every table starts with a comment line ``# evrec <kind> v<version>`` followed
by an ordinary CSV header, so readers can refuse files written under a
different schema before parsing any rows.
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

from .errors import SchemaVersionError

TABLE_VERSION = 1

COLUMNS = {
    "evaluation": ["agent", "fusion", "sigma", "level", "top1", "top3", "n"],
    "step-curve": ["agent", "fusion", "sigma", "step", "success", "mean_u_prefuse", "mean_u_fused"],
    "uncertainty": ["agent", "sigma", "level", "mean_u"],
    "recognizer-metrics": ["epoch", "loss", "lambda_kl", "train_acc", "val_acc", "mean_u_id", "mean_u_ood"],
    "policy-metrics": ["update", "mean_reward", "mean_return", "final_success", "entropy", "value_loss",
                       "clip_frac"],
}


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return v


def dumps_table(kind, rows):
    cols = COLUMNS[kind]
    buf = io.StringIO()
    buf.write(f"# evrec {kind} v{TABLE_VERSION}\n")
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) for k in cols})
    return buf.getvalue()


def write_table(path, kind, rows):
    Path(path).write_text(dumps_table(kind, rows))


def read_header(path):
    """(kind, version) from a table's first line; None if it has no header."""
    with open(path) as fh:
        first = fh.readline().strip()
    parts = first.split()
    if len(parts) != 4 or parts[:2] != ["#", "evrec"] or not parts[3].startswith("v"):
        return None
    try:
        return parts[2], int(parts[3][1:])
    except ValueError:
        return None


def read_table(path, kind=None):
    """Rows of a versioned table, with numeric columns converted to float."""
    head = read_header(path)
    if head is None:
        raise SchemaVersionError(f"{path}: missing table header")
    got_kind, version = head
    if version != TABLE_VERSION:
        raise SchemaVersionError(f"{path}: {got_kind} table v{version}, expected v{TABLE_VERSION}")
    if kind is not None and got_kind != kind:
        raise SchemaVersionError(f"{path}: expected a {kind} table, found {got_kind}")
    with open(path, newline="") as fh:
        fh.readline()
        rows = list(csv.DictReader(fh))
    text_cols = {"agent", "fusion", "level"}
    return got_kind, [{k: (v if k in text_cols else float(v)) for k, v in r.items()} for r in rows]
