"""Offset-only relative calibration of collocated barometers.

Pipeline: :func:`resample` each sensor to a common grid, :func:`inner_join`
the grids, drop impulsive rows with :func:`jump_filter`, then
:func:`estimate_offsets` solves the zero-sum-gauge least-squares problem in
closed form. At runtime :func:`apply_calibration` subtracts the offsets.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .atmo import SensorSample
from .errors import DataFormatError, InsufficientDataError, InvalidInputError, MissingCalibrationError
from .logio import FILE_VERSION, SensorLog, _load_json, _write_text

DEFAULT_BIN_WIDTH_S = 30.0
DEFAULT_MAX_AGE_DAYS = 30.0


@dataclass(frozen=True)
class BinnedSeries:
    sensor_id: str
    t_ms: np.ndarray  # left bin edges
    pressure: np.ndarray
    temperature: np.ndarray
    count: np.ndarray
    bin_width: float  # seconds


@dataclass(frozen=True)
class AlignedGrid:
    """Inner-joined grid: rows are bin times, columns are sensors (sorted ids)."""

    timestamps: np.ndarray  # (M,) ms epoch
    sensor_ids: tuple[str, ...]
    pressure: np.ndarray  # (M, N) hPa
    temperature: np.ndarray  # (M, N) deg C
    bin_width: float = DEFAULT_BIN_WIDTH_S

    @property
    def n_rows(self) -> int:
        return len(self.timestamps)

    @property
    def n_sensors(self) -> int:
        return len(self.sensor_ids)

    def take(self, keep) -> "AlignedGrid":
        return replace(self, timestamps=self.timestamps[keep], pressure=self.pressure[keep],
                       temperature=self.temperature[keep])


@dataclass(frozen=True)
class CommonSignal:
    timestamps: np.ndarray
    p_star: np.ndarray
    t_star: np.ndarray


@dataclass(frozen=True)
class CalibrationTable:
    sensor_ids: tuple[str, ...]
    pressure_offset: tuple[float, ...]  # hPa
    temperature_offset: tuple[float, ...]  # deg C
    estimated_at: int = 0  # ms epoch
    sample_count: int = 0
    gauge: str = "zero-sum"

    def __post_init__(self):
        if not (len(self.sensor_ids) == len(self.pressure_offset) == len(self.temperature_offset)):
            raise InvalidInputError("calibration columns differ in length")
        if len(set(self.sensor_ids)) != len(self.sensor_ids):
            raise InvalidInputError("duplicate sensor id in calibration")

    def __contains__(self, sensor_id):
        return sensor_id in self.sensor_ids

    def offsets(self, sensor_id: str) -> tuple[float, float]:
        try:
            k = self.sensor_ids.index(sensor_id)
        except ValueError:
            raise MissingCalibrationError(f"no calibration for sensor {sensor_id!r}") from None
        return self.pressure_offset[k], self.temperature_offset[k]

    def age_days(self, now_ms: int | None = None) -> float:
        if now_ms is None:
            now_ms = int(time.time() * 1000)
        return (now_ms - self.estimated_at) / 86_400_000.0

    def is_stale(self, now_ms: int | None = None, max_age_days: float = DEFAULT_MAX_AGE_DAYS) -> bool:
        return self.age_days(now_ms) > max_age_days

    def to_dict(self) -> dict:
        return {
            "version": FILE_VERSION,
            "estimated_at_ms": int(self.estimated_at),
            "sample_count": int(self.sample_count),
            "sensors": [
                {"id": sid, "pressure_offset_hpa": float(p), "temperature_offset_c": float(t)}
                for sid, p, t in zip(self.sensor_ids, self.pressure_offset, self.temperature_offset)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict, path=None) -> "CalibrationTable":
        if not isinstance(doc, dict) or doc.get("version") != FILE_VERSION:
            raise DataFormatError(f"unsupported or missing calibration version (want {FILE_VERSION})", path)
        try:
            sensors = doc["sensors"]
            return cls(
                sensor_ids=tuple(str(s["id"]) for s in sensors),
                pressure_offset=tuple(float(s["pressure_offset_hpa"]) for s in sensors),
                temperature_offset=tuple(float(s["temperature_offset_c"]) for s in sensors),
                estimated_at=int(doc["estimated_at_ms"]),
                sample_count=int(doc["sample_count"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"bad calibration file ({exc})", path) from None

    def save(self, path) -> Path:
        path = Path(path)
        _write_text(path, json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "CalibrationTable":
        return cls.from_dict(_load_json(path), path)

    @classmethod
    def identity(cls, sensor_ids: Iterable[str]) -> "CalibrationTable":
        ids = tuple(sensor_ids)
        zeros = (0.0,) * len(ids)
        return cls(ids, zeros, zeros)


def _as_log(stream) -> SensorLog:
    if isinstance(stream, SensorLog):
        return stream.sorted()
    return SensorLog.from_samples(stream).sorted()


def resample(stream: SensorLog | Sequence[SensorSample], bin_width: float = DEFAULT_BIN_WIDTH_S) -> BinnedSeries:
    """Average one sensor's readings into epoch-aligned bins ``[k*w, (k+1)*w)``.

    Empty bins are absent; each bin is stamped with its left edge in ms.
    """
    if not bin_width > 0:
        raise InvalidInputError(f"bin_width must be > 0, got {bin_width!r}")
    log = _as_log(stream)
    width_ms = bin_width * 1000.0
    if len(log) == 0:
        empty = np.array([], dtype=float)
        return BinnedSeries(log.sensor_id, np.array([], dtype=np.int64), empty, empty,
                            np.array([], dtype=np.int64), bin_width)
    idx = np.floor(log.t_ms / width_ms).astype(np.int64)
    bins, inverse, count = np.unique(idx, return_inverse=True, return_counts=True)
    p = np.bincount(inverse, weights=log.pressure) / count
    t = np.bincount(inverse, weights=log.temperature) / count
    edges = np.round(bins * width_ms).astype(np.int64)
    return BinnedSeries(log.sensor_id, edges, p, t, count, bin_width)


def inner_join(series: Sequence[BinnedSeries]) -> AlignedGrid:
    """Keep only bin times present for every sensor; columns in sorted sensor-id order."""
    series = list(series)
    if len(series) < 2:
        raise InvalidInputError(f"need at least 2 sensors to join, got {len(series)}")
    ids = [s.sensor_id for s in series]
    if len(set(ids)) != len(ids):
        raise InvalidInputError(f"duplicate sensor ids {ids}")
    widths = {s.bin_width for s in series}
    if len(widths) != 1:
        raise InvalidInputError(f"series binned with different widths {sorted(widths)}")
    series.sort(key=lambda s: s.sensor_id)
    common = series[0].t_ms
    for s in series[1:]:
        common = np.intersect1d(common, s.t_ms, assume_unique=True)
    p = np.empty((len(common), len(series)))
    t = np.empty_like(p)
    for j, s in enumerate(series):
        rows = np.searchsorted(s.t_ms, common)
        p[:, j] = s.pressure[rows]
        t[:, j] = s.temperature[rows]
    return AlignedGrid(common.astype(np.int64), tuple(s.sensor_id for s in series), p, t, widths.pop())


def jump_filter(grid: AlignedGrid, p_thresh: float = 1.0, t_thresh: float = 1.0) -> AlignedGrid:
    """Drop rows where any sensor jumps by more than the thresholds.

    Each row is compared with the previous row of the *input* grid, so a
    single-row spike removes both the spike and the row after it. The first
    row has no predecessor and is always kept.
    """
    if grid.n_rows < 2:
        return grid
    dp = np.abs(np.diff(grid.pressure, axis=0))
    dt = np.abs(np.diff(grid.temperature, axis=0))
    ok = np.all((dp <= p_thresh) & (dt <= t_thresh), axis=1)
    keep = np.concatenate(([True], ok))
    return grid.take(keep)


def estimate_offsets(grid: AlignedGrid, estimated_at: int | None = None) -> tuple[CalibrationTable, CommonSignal]:
    """Closed-form offsets under the zero-sum gauge.

    The common signal is the per-row cross-sensor mean; each sensor's offset
    is the time mean of its deviation from that signal.
    """
    if grid.n_sensors < 2:
        raise InvalidInputError(f"need at least 2 sensors, got {grid.n_sensors}")
    if grid.n_rows < 2:
        raise InsufficientDataError(f"need at least 2 aligned rows, got {grid.n_rows}")
    p_star = grid.pressure.mean(axis=1)
    t_star = grid.temperature.mean(axis=1)
    beta_p = (grid.pressure - p_star[:, None]).mean(axis=0)
    beta_t = (grid.temperature - t_star[:, None]).mean(axis=0)
    # the sums are zero analytically; remove the rounding residue
    beta_p -= beta_p.mean()
    beta_t -= beta_t.mean()
    if estimated_at is None:
        estimated_at = int(grid.timestamps[-1])
    table = CalibrationTable(
        sensor_ids=grid.sensor_ids,
        pressure_offset=tuple(beta_p.tolist()),
        temperature_offset=tuple(beta_t.tolist()),
        estimated_at=int(estimated_at),
        sample_count=grid.n_rows,
    )
    return table, CommonSignal(grid.timestamps.copy(), p_star, t_star)


def residual_std(grid: AlignedGrid, table: CalibrationTable, common: CommonSignal) -> dict[str, tuple[float, float]]:
    """Per-sensor std of ``reading - common - offset`` for pressure and temperature."""
    out = {}
    for j, sid in enumerate(grid.sensor_ids):
        bp, bt = table.offsets(sid)
        rp = grid.pressure[:, j] - common.p_star - bp
        rt = grid.temperature[:, j] - common.t_star - bt
        out[sid] = (float(np.std(rp)), float(np.std(rt)))
    return out


def apply_calibration(sample: SensorSample, table: CalibrationTable) -> SensorSample:
    """Subtract the sensor's offsets; raises :class:`MissingCalibrationError` for unknown ids."""
    bp, bt = table.offsets(sample.sensor_id)
    return replace(sample, pressure=sample.pressure - bp, temperature=sample.temperature - bt)


def apply_calibration_log(log: SensorLog, table: CalibrationTable) -> SensorLog:
    bp, bt = table.offsets(log.sensor_id)
    return SensorLog(log.sensor_id, log.t_ms, log.pressure - bp, log.temperature - bt, log.seq)


def calibrate(logs: Iterable[SensorLog], bin_width: float = DEFAULT_BIN_WIDTH_S,
              p_thresh: float = 1.0, t_thresh: float = 1.0):
    """Run resample, join, filter and estimate in one go.

    Returns ``(table, common, filtered_grid, raw_grid)``.
    """
    raw = inner_join([resample(log, bin_width) for log in logs])
    grid = jump_filter(raw, p_thresh, t_thresh)
    table, common = estimate_offsets(grid)
    return table, common, grid, raw
