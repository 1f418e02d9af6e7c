"""Atomic file writes and the CSV formats shared by the pipeline stages."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from ..mismatch import Transition

TRANSITION_HEADER = ["t", "x", "y", "psi", "vx", "vy", "omega", "delta", "d", "ddelta"]
LAP_HEADER = ["lap", "time_s", "mean_slack", "max_boundary_violation"]


class ArtifactError(FileNotFoundError):
    """A required stage output is missing or was modified out of band."""


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path, obj) -> Path:
    return atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def read_json(path):
    return json.loads(require(path).read_text())


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def require(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"missing artifact: {path}")
    return path


def fmt(v) -> str:
    """Shortest round-tripping text for a float."""
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([c if isinstance(c, str) else (str(c) if isinstance(c, (int, np.integer)) else fmt(c))
                    for c in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> Path:
    return atomic_write_text(path, csv_text(header, rows))


def read_csv(path):
    text = require(path).read_text()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise ValueError(f"{path}: empty CSV")
    return header, [r for r in reader if r]


def write_transitions(path, states, inputs, Ts: float) -> Path:
    """One row per state; the terminal state has empty input columns."""
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    rows = [[k * Ts, *states[k], *inputs[k]] for k in range(len(inputs))]
    # the terminal state carries no input
    rows.append([len(inputs) * Ts, *states[len(inputs)], "", ""])
    return atomic_write_text(path, csv_text(TRANSITION_HEADER, rows))


def read_transitions(path, Ts: float) -> list[Transition]:
    header, rows = read_csv(path)
    if header != TRANSITION_HEADER:
        raise ValueError(f"{path}: expected header {','.join(TRANSITION_HEADER)}")
    states = np.array([[float(c) for c in r[1:8]] for r in rows])
    inputs = [[float(c) for c in r[8:10]] for r in rows if r[8] != ""]
    if len(rows) < 2:
        raise ValueError(f"{path}: log holds no transitions")
    t = np.array([float(r[0]) for r in rows])
    dt = np.diff(t)
    if np.any(np.abs(dt - Ts) > 1e-9):
        raise ValueError(f"{path}: sample period differs from Ts={Ts}")
    inputs = np.asarray(inputs)
    return [Transition(states[k], inputs[k], states[k + 1], Ts) for k in range(len(inputs))]


def write_laps(path, result) -> Path:
    rows = [[i + 1, t, s, v] for i, (t, s, v) in enumerate(
        zip(result.lap_times, result.lap_mean_slack, result.lap_max_violation))]
    return write_csv(path, LAP_HEADER, rows)
