"""Base-station wire frames: one JSON object per line, UTF-8.

Keys, in order: ``v,id,seq,t_unix_ms,p_hpa,temp_c,p0_hpa,flags``. Floats go
through ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .calib import CalibrationTable
from .errors import DataFormatError
from .logio import SensorLog

PROTOCOL_VERSION = 1
FLAG_CALIBRATED = 1
FLAG_P0_STALE = 2
FRAME_KEYS = ("v", "id", "seq", "t_unix_ms", "p_hpa", "temp_c", "p0_hpa", "flags")


class FrameError(DataFormatError):
    pass


@dataclass(frozen=True)
class BaseFrame:
    sensor_id: str
    seq: int
    t_unix_ms: int
    p_hpa: float
    temp_c: float
    p0_hpa: float
    flags: int = FLAG_CALIBRATED
    v: int = PROTOCOL_VERSION

    @property
    def calibrated(self) -> bool:
        return bool(self.flags & FLAG_CALIBRATED)

    @property
    def p0_stale(self) -> bool:
        return bool(self.flags & FLAG_P0_STALE)

    def encode(self) -> bytes:
        return (self.to_json() + "\n").encode("utf-8")

    def to_json(self) -> str:
        return json.dumps({
            "v": self.v,
            "id": self.sensor_id,
            "seq": self.seq,
            "t_unix_ms": self.t_unix_ms,
            "p_hpa": self.p_hpa,
            "temp_c": self.temp_c,
            "p0_hpa": self.p0_hpa,
            "flags": self.flags,
        }, separators=(",", ":"), allow_nan=False)


def decode_frame(line: bytes | str) -> BaseFrame:
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError:
            raise FrameError("frame is not UTF-8") from None
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FrameError(f"frame is not JSON ({exc.msg})") from None
    if not isinstance(doc, dict) or set(doc) != set(FRAME_KEYS):
        raise FrameError(f"frame keys must be exactly {','.join(FRAME_KEYS)}")
    if doc["v"] != PROTOCOL_VERSION:
        raise FrameError(f"unsupported protocol version {doc['v']!r}")
    try:
        frame = BaseFrame(
            sensor_id=str(doc["id"]),
            seq=_int(doc["seq"]),
            t_unix_ms=_int(doc["t_unix_ms"]),
            p_hpa=_num(doc["p_hpa"]),
            temp_c=_num(doc["temp_c"]),
            p0_hpa=_num(doc["p0_hpa"]),
            flags=_int(doc["flags"]),
        )
    except (TypeError, ValueError) as exc:
        raise FrameError(f"bad frame field ({exc})") from None
    if frame.p_hpa <= 0 or frame.p0_hpa <= 0:
        raise FrameError("pressures must be positive")
    return frame


def _int(x) -> int:
    if isinstance(x, bool) or not isinstance(x, int):
        raise TypeError(f"expected integer, got {x!r}")
    return x


def _num(x) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
        raise TypeError(f"expected finite number, got {x!r}")
    return float(x)


def downsample_latest(t_ms: np.ndarray, rate: float) -> list[tuple[int, int]]:
    """Latest-sample-wins downsampling onto ticks ``t_first + k/rate``.

    Returns ``(tick_ms, sample_index)`` pairs; a tick with no new sample
    since the previous tick emits nothing.
    """
    t_ms = np.asarray(t_ms, dtype=np.int64)
    if len(t_ms) == 0:
        return []
    if not rate > 0:
        raise ValueError("rate must be > 0")
    first, last = int(t_ms[0]), int(t_ms[-1])
    n_ticks = int(math.floor((last - first) * rate / 1000.0 + 1e-9)) + 1
    ticks = first + np.round(np.arange(n_ticks) * 1000.0 / rate).astype(np.int64)
    idx = np.searchsorted(t_ms, ticks, side="right") - 1
    out = []
    prev = -1
    for tick, i in zip(ticks.tolist(), idx.tolist()):
        if i > prev:
            out.append((tick, i))
            prev = i
    return out


def build_frame(sensor_id: str, seq: int, t_ms: int, pressure: float, temperature: float,
                table: CalibrationTable | None, p0_hpa: float, p0_stale: bool = False) -> BaseFrame:
    """Calibrate one raw reading (if ``table`` is given) and wrap it in a frame."""
    flags = 0
    if table is not None:
        bp, bt = table.offsets(sensor_id)
        pressure, temperature = pressure - bp, temperature - bt
        flags |= FLAG_CALIBRATED
    if p0_stale:
        flags |= FLAG_P0_STALE
    return BaseFrame(sensor_id, seq, int(t_ms), float(pressure), float(temperature), float(p0_hpa), flags)


def frames_from_log(log: SensorLog, table: CalibrationTable | None, p0: float | Callable[[int], tuple[float, bool]],
                    rate: float = 3.0, start_seq: int = 0) -> list[tuple[int, BaseFrame]]:
    """Frames a base station replaying ``log`` would emit, with their tick times.

    ``p0`` is either a fixed reference or a callable of the tick time that
    returns ``(p0_hpa, stale)``.
    """
    log = log.sorted()
    out = []
    for k, (tick, i) in enumerate(downsample_latest(log.t_ms, rate)):
        p0_val, stale = p0(tick) if callable(p0) else (float(p0), False)
        frame = build_frame(log.sensor_id, start_seq + k, int(log.t_ms[i]), float(log.pressure[i]),
                            float(log.temperature[i]), table, p0_val, stale)
        out.append((tick, frame))
    return out
