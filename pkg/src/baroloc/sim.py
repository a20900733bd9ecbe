"""Synthetic atmospheres, building trajectories and barometer streams.

A scenario has two phases on one clock: a collocation phase where every
sensor sits on the base plane (used for calibration), then the mobile
sensor follows a :class:`TrajectoryProfile` while the base stays put.
Sensor pressures are produced by inverting the ISA map around the common
reference-plane pressure, so the differential pipeline can recover heights
exactly when noise, offsets and drift are switched off.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .atmo import STANDARD_P0_HPA, FloorPlan, height_to_pressure
from .errors import DataFormatError, InvalidInputError
from .logio import (
    Checkpoint,
    SensorLog,
    _load_json,
    _write_text,
    floor_plan_to_dict,
    read_sensor_csv,
    read_truth_csv,
    write_sensor_csv,
    write_truth_csv,
)

ATMO_DT_S = 0.01
DEFAULT_T0_MS = 1_700_000_010_000  # multiple of 30 s, so calibration bins line up with the scenario start
FLOOR_STEP_M = 2.3


@dataclass(frozen=True)
class Segment:
    start: float  # s
    end: float  # s
    start_height: float  # m
    end_height: float  # m
    motion: str = "dwell"  # dwell | ramp


@dataclass(frozen=True)
class TrajectoryProfile:
    segments: tuple[Segment, ...]
    checkpoints: tuple[Checkpoint, ...] = ()  # t_ms holds seconds from trajectory start * 1000

    def __post_init__(self):
        segs = self.segments
        if not segs:
            raise InvalidInputError("trajectory needs at least one segment")
        for s in segs:
            if not s.end > s.start:
                raise InvalidInputError(f"segment {s} has non-positive duration")
            if s.motion not in ("dwell", "ramp"):
                raise InvalidInputError(f"unknown motion {s.motion!r}")
            if s.motion == "dwell" and s.start_height != s.end_height:
                raise InvalidInputError(f"dwell segment changes height: {s}")
        for a, b in zip(segs, segs[1:]):
            if b.start != a.end or b.start_height != a.end_height:
                raise InvalidInputError(f"segments not contiguous at t={a.end}")
        for cp in self.checkpoints:
            h = float(self.height_at(cp.t_ms / 1000.0))
            if abs(h - cp.height) > 1e-9:
                raise InvalidInputError(f"checkpoint {cp.label} at {cp.height} m is off the trajectory ({h} m)")

    @property
    def duration(self) -> float:
        return self.segments[-1].end - self.segments[0].start

    def height_at(self, t_s):
        knots_t = [self.segments[0].start] + [s.end for s in self.segments]
        knots_h = [self.segments[0].start_height] + [s.end_height for s in self.segments]
        return np.interp(t_s, knots_t, knots_h)

    def to_dict(self) -> dict:
        return {
            "segments": [asdict(s) for s in self.segments],
            "checkpoints": [{"label": c.label, "time_s": c.t_ms / 1000.0, "height_m": c.height}
                            for c in self.checkpoints],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrajectoryProfile":
        segs = tuple(Segment(**s) for s in doc["segments"])
        cps = tuple(Checkpoint(c["label"], int(round(c["time_s"] * 1000)), float(c["height_m"]))
                    for c in doc.get("checkpoints", ()))
        return cls(segs, cps)


def default_building_trajectory(step: float = FLOOR_STEP_M, dwell_s: float = 20.0, ramp_s: float = 15.0,
                                elevator_dwell_s: float = 15.0, elevator_ride_s: float = 10.0,
                                walk_s: float = 15.0) -> TrajectoryProfile:
    """Stair ascent CP1..CP7 then elevator descent CP8..CP11.

    Stair checkpoints alternate floor platforms and intermediate landings,
    ``step`` metres apart; the elevator stops at every floor (two steps).
    Each checkpoint time is the middle of its dwell.
    """
    segs: list[Segment] = []
    cps: list[Checkpoint] = []
    t = 0.0

    def dwell(label, h, length):
        nonlocal t
        segs.append(Segment(t, t + length, h, h, "dwell"))
        cps.append(Checkpoint(label, int(round((t + length / 2) * 1000)), h))
        t += length

    def move(h0, h1, length):
        nonlocal t
        segs.append(Segment(t, t + length, h0, h1, "ramp"))
        t += length

    def level(k):
        # round away float noise so heights read 0, 2.3, 4.6, ...
        return round(k * step, 9)

    n_stair = 7
    for k in range(n_stair):
        if k:
            move(level(k - 1), level(k), ramp_s)
        dwell(f"CP{k + 1}", level(k), dwell_s)
    top = n_stair - 1
    move(level(top), level(top), walk_s)
    for j in range(4):
        k = top - 2 * j
        if j:
            move(level(k + 2), level(k), elevator_ride_s)
        dwell(f"CP{n_stair + 1 + j}", level(k), elevator_dwell_s)
    return TrajectoryProfile(tuple(segs), tuple(cps))


def default_floor_plan(step: float = FLOOR_STEP_M, n_levels: int = 7) -> FloorPlan:
    """Floors F1..F4 with the intermediate landings between them."""
    labels = []
    for k in range(n_levels):
        labels.append(f"F{k // 2 + 1}" if k % 2 == 0 else f"L{k // 2 + 1}-{k // 2 + 2}")
    return FloorPlan(tuple((lab, round(k * step, 9)) for k, lab in enumerate(labels)))


@dataclass(frozen=True)
class AtmosphereModel:
    p0_true: float = STANDARD_P0_HPA  # hPa at the base plane
    temperature_c: float = 21.0  # at the base plane
    temp_gradient: float = 0.0  # deg C per metre above the base plane
    reversion_rate: float = 1.0 / 3600.0  # 1/s
    volatility: float = 0.02  # hPa/sqrt(s)
    hvac_steps: tuple[tuple[float, float], ...] = ()  # (time s, delta hPa)

    def __post_init__(self):
        if self.volatility < 0 or self.reversion_rate < 0:
            raise InvalidInputError("volatility and reversion rate must be >= 0")
        object.__setattr__(self, "hvac_steps", tuple((float(t), float(d)) for t, d in self.hvac_steps))


@dataclass(frozen=True)
class SensorModel:
    sensor_id: str
    pressure_offset_true: float = 0.0  # hPa
    temperature_offset_true: float = 0.0  # deg C
    noise_sigma_p: float = 0.02  # hPa per sample
    noise_sigma_t: float = 0.05  # deg C per sample
    rate: float = 6.0  # Hz
    outlier_prob: float = 0.0
    outlier_mag: float = 0.0  # hPa

    def __post_init__(self):
        if not self.rate > 0:
            raise InvalidInputError("rate must be > 0")
        if self.noise_sigma_p < 0 or self.noise_sigma_t < 0:
            raise InvalidInputError("noise sigmas must be >= 0")
        if not 0 <= self.outlier_prob <= 1:
            raise InvalidInputError("outlier_prob must be in [0, 1]")


@dataclass(frozen=True)
class CommonAtmosphere:
    """Common signals sampled every ``dt`` seconds from t = 0."""

    dt: float
    p_star: np.ndarray  # hPa at the base plane
    t_star: np.ndarray  # deg C at the base plane
    temp_gradient: float = 0.0

    @property
    def duration(self) -> float:
        return (len(self.p_star) - 1) * self.dt

    def _index(self, t_s):
        idx = np.floor(np.asarray(t_s) / self.dt + 1e-9).astype(np.int64)
        if np.any(idx < 0) or np.any(idx >= len(self.p_star)):
            raise InvalidInputError("sample time outside the simulated atmosphere")
        return idx

    def pressure_at(self, t_s):
        return self.p_star[self._index(t_s)]

    def temperature_at(self, t_s, height=0.0):
        return self.t_star[self._index(t_s)] + self.temp_gradient * np.asarray(height)


def gen_atmosphere(model: AtmosphereModel, duration: float, seed=0, dt: float = ATMO_DT_S) -> CommonAtmosphere:
    """Ornstein-Uhlenbeck drift around ``p0_true`` plus HVAC steps."""
    if not duration > 0:
        raise InvalidInputError("duration must be > 0")
    n = int(math.floor(duration / dt + 1e-9)) + 1
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    drift = np.zeros(n)
    if model.volatility > 0 and n > 1:
        theta = model.reversion_rate
        if theta > 0:
            a = math.exp(-theta * dt)
            s = model.volatility * math.sqrt((1 - a * a) / (2 * theta))
        else:
            a, s = 1.0, model.volatility * math.sqrt(dt)
        shocks = (rng.standard_normal(n - 1) * s).tolist()
        x = 0.0
        out = [0.0]
        for e in shocks:
            x = a * x + e
            out.append(x)
        drift = np.asarray(out)
    t = np.arange(n) * dt
    steps = np.zeros(n)
    for when, delta in model.hvac_steps:
        steps[t >= when - 1e-9] += delta
    p_star = model.p0_true + drift + steps
    t_star = np.full(n, float(model.temperature_c))
    return CommonAtmosphere(dt, p_star, t_star, model.temp_gradient)


def _height_fn(traj) -> Callable:
    if isinstance(traj, TrajectoryProfile):
        return traj.height_at
    if callable(traj):
        return traj
    h = float(traj)
    return lambda t: np.full(np.shape(t), h)


def gen_sensor_stream(traj, atmo: CommonAtmosphere, sensor: SensorModel, seed=0,
                      t0_ms: int = DEFAULT_T0_MS, start: float = 0.0, duration: float | None = None) -> SensorLog:
    """Sample ``sensor`` at its rate over ``[start, start + duration)``.

    ``traj`` is a trajectory, a fixed height or a callable ``height(t_s)``
    evaluated on the scenario clock.
    """
    if duration is None:
        duration = atmo.duration - start
        if isinstance(traj, TrajectoryProfile):
            duration = traj.duration
    if start < 0 or start + duration > atmo.duration + 1e-9:
        raise InvalidInputError(f"requested [{start}, {start + duration}] s but atmosphere covers [0, {atmo.duration}] s")
    n = int(math.floor(duration * sensor.rate + 1e-9))
    t_s = start + np.arange(n) / sensor.rate
    h = np.asarray(_height_fn(traj)(t_s), dtype=float)
    temp_true = atmo.temperature_at(t_s, h)
    p_true = height_to_pressure(h, temp_true, atmo.pressure_at(t_s))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1, _stable_hash(sensor.sensor_id)]))
    noise_p = rng.standard_normal(n) * sensor.noise_sigma_p
    noise_t = rng.standard_normal(n) * sensor.noise_sigma_t
    hit = rng.random(n) < sensor.outlier_prob
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    p = p_true + sensor.pressure_offset_true + noise_p + hit * sign * sensor.outlier_mag
    temp = temp_true + sensor.temperature_offset_true + noise_t
    t_ms = t0_ms + np.round(t_s * 1000.0).astype(np.int64)
    return SensorLog(sensor.sensor_id, t_ms, p, temp, np.arange(n, dtype=np.int64))


def _stable_hash(text: str) -> int:
    # python's hash() is salted per process
    return int.from_bytes(text.encode("utf-8")[:8].ljust(8, b"\0"), "little") ^ len(text)


@dataclass(frozen=True)
class Scenario:
    seed: int = 0
    t0_unix_ms: int = DEFAULT_T0_MS
    collocation_s: float = 1800.0
    atmosphere: AtmosphereModel = field(default_factory=AtmosphereModel)
    base: SensorModel = field(default_factory=lambda: SensorModel("base", 0.35, 0.3))
    mobile: SensorModel = field(default_factory=lambda: SensorModel("mobile", -0.35, -0.3))
    trajectory: TrajectoryProfile = field(default_factory=default_building_trajectory)
    floors: FloorPlan = field(default_factory=default_floor_plan)
    reference_p0: float | None = None  # what the base station reports; defaults to p0_true

    @property
    def p0(self) -> float:
        return self.atmosphere.p0_true if self.reference_p0 is None else self.reference_p0

    @property
    def duration(self) -> float:
        return self.collocation_s + self.trajectory.duration

    @property
    def trajectory_start_ms(self) -> int:
        return self.t0_unix_ms + int(round(self.collocation_s * 1000))

    def mobile_height(self, t_s):
        t_s = np.asarray(t_s, dtype=float)
        return np.where(t_s < self.collocation_s, 0.0, self.trajectory.height_at(t_s - self.collocation_s))

    def checkpoints(self) -> list[Checkpoint]:
        off = self.trajectory_start_ms
        return [Checkpoint(c.label, off + c.t_ms, c.height) for c in self.trajectory.checkpoints]

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "t0_unix_ms": self.t0_unix_ms,
            "collocation_s": self.collocation_s,
            "atmosphere": {**asdict(self.atmosphere), "hvac_steps": [list(s) for s in self.atmosphere.hvac_steps]},
            "base": asdict(self.base),
            "mobile": asdict(self.mobile),
            "trajectory": self.trajectory.to_dict(),
            "floors": floor_plan_to_dict(self.floors)["floors"],
            "reference_p0": self.reference_p0,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        """Build from a (possibly partial) parameter document; missing keys take defaults."""
        d = cls()
        try:
            traj = doc.get("trajectory")
            if traj is None:
                trajectory = d.trajectory
            elif "segments" in traj:
                trajectory = TrajectoryProfile.from_dict(traj)
            else:
                trajectory = default_building_trajectory(**traj.get("building", {}))
            floors = d.floors
            if "floors" in doc:
                floors = FloorPlan(tuple((f["label"], float(f["height_m"])) for f in doc["floors"]))
            atmo = doc.get("atmosphere", {})
            return cls(
                seed=int(doc.get("seed", d.seed)),
                t0_unix_ms=int(doc.get("t0_unix_ms", d.t0_unix_ms)),
                collocation_s=float(doc.get("collocation_s", d.collocation_s)),
                atmosphere=AtmosphereModel(**{**asdict(d.atmosphere), **atmo,
                                              "hvac_steps": tuple(map(tuple, atmo.get("hvac_steps", ())))}),
                base=SensorModel(**{**asdict(d.base), **doc.get("base", {})}),
                mobile=SensorModel(**{**asdict(d.mobile), **doc.get("mobile", {})}),
                trajectory=trajectory,
                floors=floors,
                reference_p0=doc.get("reference_p0", d.reference_p0),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"bad scenario ({exc})") from None

    def save(self, path) -> Path:
        path = Path(path)
        _write_text(path, json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "Scenario":
        try:
            return cls.from_dict(_load_json(path))
        except DataFormatError as exc:
            if exc.path is None:
                raise DataFormatError(str(exc), path) from None
            raise


@dataclass
class SimulationResult:
    scenario: Scenario
    atmosphere: CommonAtmosphere
    base: SensorLog
    mobile: SensorLog
    truth: list[Checkpoint]

    @property
    def logs(self) -> list[SensorLog]:
        return [self.base, self.mobile]


def simulate(scenario: Scenario, atmo_dt: float = ATMO_DT_S) -> SimulationResult:
    """Generate the common atmosphere and both sensor logs for ``scenario``."""
    atmo = gen_atmosphere(scenario.atmosphere, scenario.duration + 1.0, scenario.seed, atmo_dt)
    kw = dict(seed=scenario.seed, t0_ms=scenario.t0_unix_ms, start=0.0, duration=scenario.duration)
    base = gen_sensor_stream(0.0, atmo, scenario.base, **kw)
    mobile = gen_sensor_stream(scenario.mobile_height, atmo, scenario.mobile, **kw)
    return SimulationResult(scenario, atmo, base, mobile, scenario.checkpoints())


def write_scenario(streams: Sequence[SensorLog], ground_truth: Sequence[Checkpoint], out_dir,
                   truth_name: str = "truth.csv") -> list[Path]:
    """One ``<sensor_id>.csv`` per stream plus the ground-truth checkpoint CSV."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataFormatError(f"cannot create output directory ({exc.strerror or exc})", out_dir) from exc
    paths = [write_sensor_csv(out_dir / f"{s.sensor_id}.csv", s) for s in streams]
    paths.append(write_truth_csv(out_dir / truth_name, ground_truth))
    return paths


def read_scenario(out_dir, truth_name: str = "truth.csv") -> tuple[dict[str, SensorLog], list[Checkpoint]]:
    out_dir = Path(out_dir)
    logs: dict[str, SensorLog] = {}
    for p in sorted(out_dir.glob("*.csv")):
        if p.name == truth_name:
            continue
        logs.update(read_sensor_csv(p))
    return logs, read_truth_csv(out_dir / truth_name)
