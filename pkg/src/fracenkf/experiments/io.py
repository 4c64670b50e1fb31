"""Run-directory files: full-precision CSV and deterministic JSON."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from ..twostage import ObservationSeries

FMT = "%.17g"


def write_csv(path, header: list[str], rows) -> None:
    A = np.atleast_2d(np.asarray(rows, dtype=float))
    if A.size == 0:
        A = A.reshape(0, len(header))
    np.savetxt(path, A, fmt=FMT, delimiter=",", header=",".join(header), comments="")


def read_csv(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    A = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if A.size == 0:
        A = A.reshape(0, len(header))
    return header, A


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return None if not math.isfinite(v) else v
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def save_ensemble(path, theta) -> None:
    """Members as rows, parameters as columns."""
    th = np.atleast_2d(theta)
    write_csv(path, [f"theta_{i}" for i in range(th.shape[0])], th.T)


def load_ensemble(path) -> np.ndarray:
    return read_csv(path)[1].T.copy()


def save_data(path, series: ObservationSeries) -> None:
    """One row per reading: ``step, time, sensor, x, y, value`` (time-major within a step)."""
    S = np.asarray(series.sensors)
    rows = []
    for k in range(1, series.n_steps + 1):
        d, t = series.step(k)
        vals = d.reshape(t.size, S.shape[0])
        for i, ti in enumerate(t):
            for j in range(S.shape[0]):
                rows.append((k, ti, j, S[j, 0], S[j, 1], vals[i, j]))
    write_csv(path, ["step", "time", "sensor", "x", "y", "value"], rows)


def load_data(path) -> ObservationSeries:
    _, A = read_csv(path)
    steps = np.unique(A[:, 0]).astype(int)
    n_s = int(A[:, 2].max()) + 1
    sensors = A[:n_s, 3:5].copy()
    data, times = [], []
    for k in steps:
        rows = A[A[:, 0] == k]
        data.append(rows[:, 5].copy())
        times.append(rows[::n_s, 1].copy())
    return ObservationSeries(tuple(data), tuple(times), sensors)
