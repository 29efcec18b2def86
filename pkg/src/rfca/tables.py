"""CSV readers and writers for the pipeline's tabular files."""

from __future__ import annotations

import csv
import io
import math

import numpy as np

from .regions import AdjacencyGraph, IndexTable

METRICS_COLUMNS = ["region", "fom", "producer", "user", "hits", "misses", "false_alarms",
                   "fom_std", "producer_std", "user_std", "baseline_fom", "repetitions"]
CONTRIBUTION_COLUMNS = ["region", "feature", "weight"]
FARMLAND_COLUMNS = ["epoch", "sim_area", "actual_area"]
REGION_COLUMNS = ["unit_id", "cluster", "region"]


def read_index_table(path) -> IndexTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "unit_id":
            raise ValueError(f"{path}: first column must be unit_id")
        ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header) or any(v.strip() == "" for v in row):
                raise ValueError(f"{path}:{lineno}: missing values")
            ids.append(row[0].strip())
            rows.append([float(v) for v in row[1:]])
    return IndexTable(ids, header[1:], np.array(rows))


def read_adjacency(path) -> AdjacencyGraph:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["unit_a", "unit_b"]:
            raise ValueError(f"{path}: expected columns unit_a,unit_b")
        return AdjacencyGraph.from_pairs((a.strip(), b.strip()) for a, b, *_ in reader)


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "" if math.isnan(value) else repr(float(value))
    return str(value)


def write_csv(path, columns, rows) -> None:
    """Write dict rows with a header row declaring ``columns``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([fmt(row.get(c)) for c in columns])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
