"""CSV and JSON serialization of screening traces and batch tables.

Numbers are written with ``%.10g`` so repeated runs give byte-identical
files.  Trace files start with ``# key: value`` comment lines carrying the
run header.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np

from vesselscreen import __version__
from vesselscreen.config import scenario_to_dict
from vesselscreen.screening import BATCH_COLUMNS, TRACE_COLUMNS, ScreeningTrace

PathLike = Union[str, Path]


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if math.isnan(value):
            return "nan"
        return "%.10g" % float(value)
    return str(value)


def write_trace(trace: ScreeningTrace, path: PathLike) -> Path:
    path = Path(path)
    header = dict(trace.header)
    header["status"] = trace.status
    ms = trace.config.metrics
    header.update(
        or_threshold_deg=fmt(ms.or_threshold_deg),
        ce_threshold_mm=fmt(ms.ce_threshold_mm),
        ra_threshold_mm=fmt(ms.ra_threshold_mm),
        hold_s=fmt(ms.hold_s),
    )
    with open(path, "w", newline="") as fh:
        for key, val in header.items():
            fh.write(f"# {key}: {val}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        cols = [trace.columns[c] for c in TRACE_COLUMNS]
        for i in range(len(trace)):
            writer.writerow([fmt(float(c[i])) for c in cols])
    return path


def read_trace(path: PathLike) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    """Return (header, columns) of a trace CSV."""
    header: Dict[str, str] = {}
    body: List[str] = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].partition(":")
                header[key.strip()] = val.strip()
            else:
                body.append(line)
    reader = csv.reader(body)
    try:
        names = next(reader)
    except StopIteration:
        raise ValueError(f"{path}: no column header") from None
    missing = set(TRACE_COLUMNS) - set(names)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    data = np.array([[float(x) for x in row] for row in reader if row], dtype=float).reshape(-1, len(names))
    return header, {n: data[:, i] for i, n in enumerate(names)}


def write_table(rows: Iterable[Mapping[str, object]], columns: Sequence[str], path: PathLike) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt(row[c]) if c in row else "" for c in columns])
    return path


def read_table(path: PathLike) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_summary(summary: Mapping[str, object], path: PathLike) -> Path:
    return write_table([summary], list(summary), path)


def write_batch(rows: Sequence[Mapping[str, object]], path: PathLike) -> Path:
    return write_table(rows, BATCH_COLUMNS, path)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return None if math.isnan(x) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


def write_metadata(trace: ScreeningTrace, path: PathLike, extra: Mapping[str, object] = None) -> Path:
    path = Path(path)
    meta = {
        "package_version": __version__,
        "status": trace.status,
        "n_ticks": len(trace),
        "header": trace.header,
        "summary": trace.summary,
        "config": scenario_to_dict(trace.config),
    }
    if extra:
        meta.update(extra)
    path.write_text(json.dumps(_jsonable(meta), indent=2, sort_keys=True) + "\n")
    return path
