"""File formats: trajectory CSVs and JSON model files."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import quat
from .dmp import DmpParams, ExpectedSensorTraces, Rollout

BASE_COLUMNS = ["t", "r", "q1", "q2", "q3", "wx", "wy", "wz", "ax", "ay", "az"]
POSITION_COLUMNS = ["x", "y", "z"]


class FormatError(ValueError):
    """A file exists but cannot be parsed; the message names the file."""


def write_trajectory(
    path,
    times: np.ndarray,
    Q: np.ndarray,
    omega: np.ndarray,
    omegadot: np.ndarray,
    sensors: Optional[np.ndarray] = None,
    positions: Optional[np.ndarray] = None,
) -> None:
    """Write ``t,r,q1,q2,q3,wx,wy,wz,ax,ay,az[,x,y,z][,s1..sS]``."""
    cols = [np.asarray(times)[:, None], np.asarray(Q), np.asarray(omega), np.asarray(omegadot)]
    header = list(BASE_COLUMNS)
    if positions is not None:
        cols.append(np.asarray(positions))
        header += POSITION_COLUMNS
    if sensors is not None:
        sensors = np.asarray(sensors)
        cols.append(sensors)
        header += [f"s{i + 1}" for i in range(sensors.shape[1])]
    data = np.hstack(cols)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in data:
            w.writerow([repr(float(v)) for v in row])


def write_rollout(path, roll: Rollout, positions: Optional[np.ndarray] = None) -> None:
    write_trajectory(path, roll.times, roll.Q, roll.omega, roll.omegadot, roll.sensors, positions)


def read_table(path) -> dict:
    """Columns of a numeric CSV with a header row, as float arrays."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if len(rows) < 2:
        raise FormatError(f"{path}: no data rows")
    header = [h.strip() for h in rows[0]]
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if data.ndim != 2 or data.shape[1] != len(header):
        raise FormatError(f"{path}: rows do not match the {len(header)}-column header")
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: non-finite values")
    return {h: data[:, i] for i, h in enumerate(header)}


def read_trajectory(path) -> tuple[Rollout, Optional[np.ndarray]]:
    """Parse a trajectory CSV into a rollout (and positions when present)."""
    cols = read_table(path)
    missing = [c for c in BASE_COLUMNS if c not in cols]
    if missing:
        raise FormatError(f"{path}: missing columns {missing}")
    Q = np.column_stack([cols[c] for c in ("r", "q1", "q2", "q3")])
    try:
        quat.check_unit(Q, tol=1e-4)
    except quat.QuaternionError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    s_names = sorted((c for c in cols if c[:1] == "s" and c[1:].isdigit()), key=lambda c: int(c[1:]))
    sensors = np.column_stack([cols[c] for c in s_names]) if s_names else None
    positions = np.column_stack([cols[c] for c in POSITION_COLUMNS]) if all(c in cols for c in POSITION_COLUMNS) else None
    try:
        roll = Rollout(
            times=cols["t"],
            Q=quat.normalize(Q),
            omega=np.column_stack([cols[c] for c in ("wx", "wy", "wz")]),
            omegadot=np.column_stack([cols[c] for c in ("ax", "ay", "az")]),
            sensors=sensors,
        )
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return roll, positions


def _dump(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def load_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_primitive(path, nominal: DmpParams, expected: Optional[ExpectedSensorTraces] = None) -> None:
    obj = {"dmp": nominal.to_dict()}
    if expected is not None:
        obj["expected_sensor_traces"] = expected.to_dict()
    _dump(path, obj)


def load_primitive(path) -> tuple[DmpParams, Optional[ExpectedSensorTraces]]:
    obj = load_json(path)
    try:
        nominal = DmpParams.from_dict(obj["dmp"])
        exp = obj.get("expected_sensor_traces")
        return nominal, (ExpectedSensorTraces.from_dict(exp) if exp is not None else None)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_pmnn(path, params) -> None:
    _dump(path, params.to_dict())


def load_pmnn(path):
    from .pmnn import PmnnParams

    obj = load_json(path)
    try:
        return PmnnParams.from_dict(obj)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_rows(path, header: Sequence[str], rows) -> None:
    """Plain CSV; floats are written with ``repr`` so reruns compare bit-exact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(header))
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
