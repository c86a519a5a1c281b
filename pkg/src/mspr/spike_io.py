"""Spike CSV and JSON document I/O.

Spike files are UTF-8 CSV with header ``trial,neuron,time`` (0-based ids,
time in seconds).  Optional leading metadata lines ``# key=value`` carry the
trial duration ``T`` and, so that trailing empty trials/neurons survive a
round trip, ``n_trials`` and ``n_neurons``.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .simulator import SpikeDataset

__all__ = ["SpikeFormatError", "DataIOError", "read_spikes", "write_spikes", "write_json", "read_json", "write_matrix_csv", "write_table_csv"]

HEADER = ["trial", "neuron", "time"]


class SpikeFormatError(ValueError):
    """Malformed spike file contents."""


class DataIOError(OSError):
    """File-system failure, with the offending path in the message."""


def _open(path, mode):
    try:
        return open(path, mode, encoding="utf-8", newline="")
    except OSError as e:
        raise DataIOError(f"{path}: {e.strerror or e}") from e


def read_spikes(path, T: float | None = None) -> SpikeDataset:
    """Load a spike CSV.  ``T`` overrides the file's ``# T=`` line."""
    meta = {}
    rows = []
    with _open(path, "r") as fh:
        lines = fh.read().splitlines()
    body_start = None
    for lineno, line in enumerate(lines, start=1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            key, sep, val = s[1:].partition("=")
            if sep:
                meta[key.strip()] = val.strip()
            continue
        body_start = lineno
        break
    if body_start is None:
        raise SpikeFormatError(f"{path}: missing header 'trial,neuron,time'")
    header = [h.strip() for h in lines[body_start - 1].split(",")]
    if header != HEADER:
        raise SpikeFormatError(f"{path}:{body_start}: expected header 'trial,neuron,time', got {lines[body_start - 1]!r}")

    for lineno, rec in enumerate(csv.reader(lines[body_start:]), start=body_start + 1):
        if not rec or all(not c.strip() for c in rec):
            continue
        if len(rec) != 3:
            raise SpikeFormatError(f"{path}:{lineno}: expected 3 fields, got {len(rec)}")
        try:
            r, i, t = int(rec[0]), int(rec[1]), float(rec[2])
        except ValueError:
            raise SpikeFormatError(f"{path}:{lineno}: malformed row {','.join(rec)!r}") from None
        if r < 0 or i < 0 or not math.isfinite(t):
            raise SpikeFormatError(f"{path}:{lineno}: malformed row {','.join(rec)!r}")
        rows.append((r, i, t, lineno))

    if T is None:
        if "T" not in meta:
            raise SpikeFormatError(f"{path}: trial duration unknown; add a '# T=<seconds>' line or pass T")
        try:
            T = float(meta["T"])
        except ValueError:
            raise SpikeFormatError(f"{path}: bad T metadata {meta['T']!r}") from None
    if not (math.isfinite(T) and T > 0):
        raise SpikeFormatError(f"{path}: trial duration must be positive, got {T}")

    n_trials = max([r for r, *_ in rows], default=-1) + 1
    p = max([i for _, i, *_ in rows], default=-1) + 1
    n_trials = max(n_trials, int(meta.get("n_trials", 0)))
    p = max(p, int(meta.get("n_neurons", 0)))
    if n_trials < 1 or p < 1:
        raise SpikeFormatError(f"{path}: no spikes and no n_trials/n_neurons metadata")

    trains = [[[] for _ in range(p)] for _ in range(n_trials)]
    seen = set()
    for r, i, t, lineno in rows:
        if not 0 < t <= T:
            raise SpikeFormatError(f"{path}:{lineno}: spike time {t} outside (0, {T}]")
        if (r, i, t) in seen:
            raise SpikeFormatError(f"{path}:{lineno}: duplicate spike (trial={r}, neuron={i}, time={t})")
        seen.add((r, i, t))
        trains[r][i].append(t)
    return SpikeDataset(T, tuple(tuple(np.sort(tr) for tr in trial) for trial in trains))


def write_spikes(data: SpikeDataset, path) -> None:
    """Write spikes in canonical (trial, neuron, time) order, 9 decimals."""
    with _open(path, "w") as fh:
        try:
            fh.write(f"# T={data.T!r}\n# n_trials={data.n_trials}\n# n_neurons={data.p}\n")
            fh.write(",".join(HEADER) + "\n")
            for r, trial in enumerate(data.spikes):
                for i, train in enumerate(trial):
                    fh.writelines(f"{r},{i},{t:.9f}\n" for t in train)
        except OSError as e:
            raise DataIOError(f"{path}: {e.strerror or e}") from e


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(obj, path) -> None:
    with _open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, allow_nan=False)
        fh.write("\n")


def read_json(path):
    with _open(path, "r") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: invalid JSON ({e})") from None


def write_matrix_csv(path, matrix, header=None, row_labels=None) -> None:
    """Plot-ready CSV of a 2-D array; nan cells are left empty."""
    m = np.asarray(matrix, dtype=float)
    with _open(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header is not None:
            w.writerow(([""] if row_labels is not None else []) + list(header))
        for k, row in enumerate(m):
            cells = ["" if math.isnan(v) else repr(float(v)) for v in row]
            w.writerow(([row_labels[k]] if row_labels is not None else []) + cells)


def write_table_csv(path, rows, columns) -> None:
    """CSV of dict rows; nan floats are left empty."""
    def cell(v):
        if isinstance(v, float):
            return "" if math.isnan(v) else repr(v)
        return str(v)

    with _open(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([cell(row[c]) for c in columns])


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"{path}: {e.strerror or e}") from e
    return p
