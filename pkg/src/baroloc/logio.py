"""File formats: sensor CSV logs, calibration JSON, floor plans, ground truth.

Sensor log (CSV, UTF-8, header row)::

    sensor_id,t_unix_ms,p_hpa,temp_c,seq

Calibration file (JSON)::

    {"version": 1, "estimated_at_ms": ..., "sample_count": ...,
     "sensors": [{"id": ..., "pressure_offset_hpa": ..., "temperature_offset_c": ...}]}

Floor plan (JSON)::

    {"version": 1, "floors": [{"label": "F1", "height_m": 0.0}, ...]}

Ground truth (CSV)::

    label,t_unix_ms,height_m
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .atmo import FloorPlan, SensorSample
from .errors import DataFormatError, InvalidInputError

SENSOR_HEADER = ("sensor_id", "t_unix_ms", "p_hpa", "temp_c", "seq")
TRUTH_HEADER = ("label", "t_unix_ms", "height_m")
FILE_VERSION = 1


@dataclass
class SensorLog:
    """Columnar readings of a single sensor, sorted by time."""

    sensor_id: str
    t_ms: np.ndarray
    pressure: np.ndarray
    temperature: np.ndarray
    seq: np.ndarray = None

    def __post_init__(self):
        self.t_ms = np.asarray(self.t_ms, dtype=np.int64)
        self.pressure = np.asarray(self.pressure, dtype=float)
        self.temperature = np.asarray(self.temperature, dtype=float)
        if self.seq is None:
            self.seq = np.arange(len(self.t_ms), dtype=np.int64)
        self.seq = np.asarray(self.seq, dtype=np.int64)
        n = len(self.t_ms)
        if not (len(self.pressure) == len(self.temperature) == len(self.seq) == n):
            raise InvalidInputError("column lengths differ")

    def __len__(self):
        return len(self.t_ms)

    def sorted(self) -> "SensorLog":
        if len(self) < 2 or np.all(np.diff(self.t_ms) >= 0):
            return self
        order = np.argsort(self.t_ms, kind="stable")
        return SensorLog(self.sensor_id, self.t_ms[order], self.pressure[order],
                         self.temperature[order], self.seq[order])

    def window(self, start_ms=None, end_ms=None) -> "SensorLog":
        """Rows with ``start_ms <= t < end_ms``."""
        keep = np.ones(len(self), dtype=bool)
        if start_ms is not None:
            keep &= self.t_ms >= start_ms
        if end_ms is not None:
            keep &= self.t_ms < end_ms
        return SensorLog(self.sensor_id, self.t_ms[keep], self.pressure[keep],
                         self.temperature[keep], self.seq[keep])

    def samples(self) -> Iterator[SensorSample]:
        for t, p, tc, s in zip(self.t_ms.tolist(), self.pressure.tolist(),
                               self.temperature.tolist(), self.seq.tolist()):
            yield SensorSample(self.sensor_id, t, p, tc, s)

    @classmethod
    def from_samples(cls, samples: Iterable[SensorSample], sensor_id: str | None = None) -> "SensorLog":
        samples = list(samples)
        if sensor_id is None:
            ids = {s.sensor_id for s in samples}
            if len(ids) > 1:
                raise InvalidInputError(f"samples from several sensors: {sorted(ids)}")
            sensor_id = ids.pop() if ids else ""
        return cls(
            sensor_id,
            [s.timestamp for s in samples],
            [s.pressure for s in samples],
            [s.temperature for s in samples],
            [s.seq for s in samples],
        )


def _fmt(x: float) -> str:
    # repr round-trips doubles exactly
    return repr(float(x))


def format_sample_row(s: SensorSample) -> str:
    return f"{s.sensor_id},{s.timestamp},{_fmt(s.pressure)},{_fmt(s.temperature)},{s.seq}"


def parse_sample_row(row: Sequence[str], path=None, line=None) -> SensorSample:
    if len(row) != len(SENSOR_HEADER):
        raise DataFormatError(f"expected {len(SENSOR_HEADER)} fields, got {len(row)}", path, line)
    sid, t, p, tc, seq = (x.strip() for x in row)
    try:
        t_ms = int(t)
        pressure = float(p)
        temp = float(tc)
        seq_n = int(seq) if seq else 0
    except ValueError as exc:
        raise DataFormatError(f"bad number ({exc})", path, line) from None
    try:
        return SensorSample(sid, t_ms, pressure, temp, seq_n)
    except InvalidInputError as exc:
        raise DataFormatError(str(exc), path, line) from None


def iter_sensor_csv(lines: Iterable[str], path=None) -> Iterator[SensorSample]:
    """Parse sensor-log lines, header first. Malformed rows raise with their line number."""
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None:
        return
    if tuple(h.strip() for h in header) != SENSOR_HEADER:
        raise DataFormatError(f"bad header {header!r}, expected {','.join(SENSOR_HEADER)}", path, 1)
    for row in reader:
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        yield parse_sample_row(row, path, reader.line_num)


def read_sensor_csv(path) -> dict[str, SensorLog]:
    """Read a sensor log; returns one :class:`SensorLog` per sensor id, time-sorted."""
    path = Path(path)
    cols: dict[str, list[list]] = {}
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            for s in iter_sensor_csv(fh, path):
                c = cols.setdefault(s.sensor_id, [[], [], [], []])
                c[0].append(s.timestamp)
                c[1].append(s.pressure)
                c[2].append(s.temperature)
                c[3].append(s.seq)
    except OSError as exc:
        raise DataFormatError(f"cannot read ({exc.strerror})", path) from exc
    return {sid: SensorLog(sid, *c).sorted() for sid, c in sorted(cols.items())}


def read_single_sensor_csv(path) -> SensorLog:
    logs = read_sensor_csv(path)
    if len(logs) != 1:
        raise DataFormatError(f"expected exactly one sensor, found {sorted(logs)}", path)
    return next(iter(logs.values()))


def write_sensor_csv(path, logs: SensorLog | Iterable[SensorLog]) -> Path:
    path = Path(path)
    if isinstance(logs, SensorLog):
        logs = [logs]
    buf = io.StringIO()
    buf.write(",".join(SENSOR_HEADER) + "\n")
    for log in logs:
        for t, p, tc, s in zip(log.t_ms.tolist(), log.pressure.tolist(),
                               log.temperature.tolist(), log.seq.tolist()):
            buf.write(f"{log.sensor_id},{t},{p!r},{tc!r},{s}\n")
    _write_text(path, buf.getvalue())
    return path


def _write_text(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise DataFormatError(f"cannot write ({exc.strerror or exc})", path) from exc


def _load_json(path):
    path = Path(path)
    try:
        with path.open(encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataFormatError(f"cannot read ({exc.strerror})", path) from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"invalid JSON ({exc.msg})", path, exc.lineno) from None


def _check_version(doc, path):
    if not isinstance(doc, dict) or doc.get("version") != FILE_VERSION:
        raise DataFormatError(f"unsupported or missing version (want {FILE_VERSION})", path)


def read_floor_plan(path) -> FloorPlan:
    doc = _load_json(path)
    _check_version(doc, path)
    try:
        entries = tuple((str(f["label"]), float(f["height_m"])) for f in doc["floors"])
        return FloorPlan(entries)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"bad floor plan ({exc})", path) from None


def floor_plan_to_dict(plan: FloorPlan) -> dict:
    return {"version": FILE_VERSION,
            "floors": [{"label": lab, "height_m": h} for lab, h in plan.entries]}


def write_floor_plan(path, plan: FloorPlan) -> Path:
    path = Path(path)
    _write_text(path, json.dumps(floor_plan_to_dict(plan), indent=2) + "\n")
    return path


@dataclass(frozen=True)
class Checkpoint:
    label: str
    t_ms: int
    height: float


def write_truth_csv(path, checkpoints: Iterable[Checkpoint]) -> Path:
    path = Path(path)
    lines = [",".join(TRUTH_HEADER)]
    lines += [f"{c.label},{c.t_ms},{c.height!r}" for c in checkpoints]
    _write_text(path, "\n".join(lines) + "\n")
    return path


def read_truth_csv(path) -> list[Checkpoint]:
    path = Path(path)
    out = []
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != TRUTH_HEADER:
                raise DataFormatError(f"bad header, expected {','.join(TRUTH_HEADER)}", path, 1)
            for row in reader:
                if not row:
                    continue
                if len(row) != 3:
                    raise DataFormatError(f"expected 3 fields, got {len(row)}", path, reader.line_num)
                try:
                    h = float(row[2])
                    cp = Checkpoint(row[0].strip(), int(row[1]), h)
                except ValueError as exc:
                    raise DataFormatError(f"bad number ({exc})", path, reader.line_num) from None
                if not math.isfinite(h):
                    raise DataFormatError("non-finite height", path, reader.line_num)
                out.append(cp)
    except OSError as exc:
        raise DataFormatError(f"cannot read ({exc.strerror})", path) from exc
    return out


def read_estimates_ndjson(path):
    from .atmo import AltitudeEstimate

    path = Path(path)
    out = []
    try:
        with path.open(encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    out.append(AltitudeEstimate.from_record(json.loads(line)))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise DataFormatError(f"bad estimate record ({exc})", path, n) from None
    except OSError as exc:
        raise DataFormatError(f"cannot read ({exc.strerror})", path) from exc
    return out


def write_estimates_ndjson(path, estimates) -> Path:
    path = Path(path)
    text = "".join(json.dumps(e.to_record()) + "\n" for e in estimates)
    _write_text(path, text)
    return path
