"""ISA tropospheric height map, differential altitude and floor indexing.

Every function here is pure. Pressures are hPa, temperatures are degrees
Celsius at the API boundary and Kelvin internally, heights are metres.
Scalar and numpy-array inputs are both accepted by the conversion routines.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidInputError, OutOfDomainError

KELVIN_OFFSET = 273.15
STANDARD_P0_HPA = 1013.25

# MEMS barometer operating envelope; samples outside are rejected at ingest.
PRESSURE_RANGE_HPA = (300.0, 1200.0)
TEMPERATURE_RANGE_C = (-40.0, 85.0)
# Historical terrestrial sea-level extremes.
P0_RANGE_HPA = (870.0, 1085.0)

# Distances closer than this are treated as ties by floor_index.
FLOOR_TIE_TOL_M = 1e-9


@dataclass(frozen=True)
class IsaConstants:
    lapse_rate: float = 0.0065  # K/m
    gas_constant: float = 287.05  # J/(kg K)
    gravity: float = 9.80665  # m/s^2

    def __post_init__(self):
        for name in ("lapse_rate", "gas_constant", "gravity"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise InvalidInputError(f"{name} must be finite and > 0, got {v!r}")

    @property
    def kappa(self) -> float:
        return self.gas_constant * self.lapse_rate / self.gravity

    def scaled(self, lapse=1.0, gas=1.0, grav=1.0) -> "IsaConstants":
        return IsaConstants(self.lapse_rate * lapse, self.gas_constant * gas, self.gravity * grav)


DEFAULT_CONSTANTS = IsaConstants()


@dataclass(frozen=True)
class SensorSample:
    """One timestamped reading from an identified sensor."""

    sensor_id: str
    timestamp: int  # ms since Unix epoch
    pressure: float  # hPa
    temperature: float  # deg C
    seq: int = 0

    def __post_init__(self):
        if not self.sensor_id:
            raise InvalidInputError("sensor_id must be non-empty")
        if not (math.isfinite(self.pressure) and math.isfinite(self.temperature)):
            raise InvalidInputError(f"non-finite reading from {self.sensor_id}")
        lo, hi = PRESSURE_RANGE_HPA
        if not lo < self.pressure < hi:
            raise InvalidInputError(f"pressure {self.pressure} hPa outside ({lo}, {hi})")
        lo, hi = TEMPERATURE_RANGE_C
        if not lo < self.temperature < hi:
            raise InvalidInputError(f"temperature {self.temperature} C outside ({lo}, {hi})")


@dataclass(frozen=True)
class AtmosphereReference:
    """Sea-level reference pressure and where it came from."""

    p0: float  # hPa
    fetched_at: int = 0  # ms epoch
    source: str = "static"  # static | file | http

    def __post_init__(self):
        lo, hi = P0_RANGE_HPA
        if not (math.isfinite(self.p0) and lo < self.p0 < hi):
            raise InvalidInputError(f"reference pressure {self.p0!r} hPa outside ({lo}, {hi})")
        if self.source not in ("static", "file", "http"):
            raise InvalidInputError(f"unknown reference source {self.source!r}")

    def is_stale(self, now_ms: int, ttl_s: float) -> bool:
        if self.source == "static":
            return False
        return now_ms - self.fetched_at > ttl_s * 1000.0


@dataclass(frozen=True)
class FloorPlan:
    """Ordered reference heights, relative to the base sensor plane."""

    entries: tuple[tuple[str, float], ...]
    reference_frame: str = "heights relative to base sensor plane"

    def __post_init__(self):
        entries = tuple((str(lab), float(h)) for lab, h in self.entries)
        object.__setattr__(self, "entries", entries)
        if not entries:
            raise InvalidInputError("floor plan needs at least one entry")
        labels = [lab for lab, _ in entries]
        if len(set(labels)) != len(labels):
            raise InvalidInputError("floor labels must be unique")
        heights = [h for _, h in entries]
        if not all(math.isfinite(h) for h in heights):
            raise InvalidInputError("floor heights must be finite")
        if any(b <= a for a, b in zip(heights, heights[1:])):
            raise InvalidInputError("floor heights must be strictly increasing")

    @classmethod
    def from_heights(cls, heights: Iterable[float], labels: Iterable[str] | None = None):
        heights = list(heights)
        if labels is None:
            labels = [f"F{k}" for k in range(len(heights))]
        return cls(tuple(zip(labels, heights)))

    @property
    def heights(self) -> tuple[float, ...]:
        return tuple(h for _, h in self.entries)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(lab for lab, _ in self.entries)


@dataclass(frozen=True)
class AltitudeEstimate:
    timestamp: int  # mobile sample time, ms epoch
    h_mobile: float
    h_base: float
    delta_h: float
    floor_index: int
    floor_label: str
    base_age: int  # ms
    quality: str = "fresh"  # fresh | held_base | degraded

    def to_record(self) -> dict:
        return {
            "t_unix_ms": self.timestamp,
            "h_m": self.h_mobile,
            "h_b": self.h_base,
            "dh_m": self.delta_h,
            "floor_index": self.floor_index,
            "floor_label": self.floor_label,
            "base_age_ms": self.base_age,
            "quality": self.quality,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "AltitudeEstimate":
        return cls(
            timestamp=int(rec["t_unix_ms"]),
            h_mobile=float(rec["h_m"]),
            h_base=float(rec["h_b"]),
            delta_h=float(rec["dh_m"]),
            floor_index=int(rec["floor_index"]),
            floor_label=str(rec["floor_label"]),
            base_age=int(rec["base_age_ms"]),
            quality=str(rec["quality"]),
        )


def _p0_of(ref) -> float:
    p0 = ref.p0 if isinstance(ref, AtmosphereReference) else ref
    if not (np.all(np.isfinite(p0)) and np.all(np.asarray(p0) > 0)):
        raise InvalidInputError(f"reference pressure must be finite and > 0, got {p0!r}")
    return p0


def _kelvin(temperature):
    t_k = np.asarray(temperature, dtype=float) + KELVIN_OFFSET
    if not (np.all(np.isfinite(t_k)) and np.all(t_k > 0)):
        raise InvalidInputError(f"temperature must be finite and above absolute zero, got {temperature!r}")
    return t_k


def _maybe_scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def pressure_to_height(pressure, temperature, ref=STANDARD_P0_HPA, consts: IsaConstants = DEFAULT_CONSTANTS):
    """Height in metres of ``pressure`` below the reference ``ref.p0``.

    ``h = (T_K / L) * (1 - (P / P0) ** kappa)`` with T_K the absolute
    temperature of the same sensor.
    """
    p0 = ref.p0 if isinstance(ref, AtmosphereReference) else ref
    if isinstance(pressure, float) and isinstance(temperature, float) and isinstance(p0, (int, float)):
        return _height_scalar(pressure, temperature, p0, consts)
    p = np.asarray(pressure, dtype=float)
    if not (np.all(np.isfinite(p)) and np.all(p > 0)):
        raise InvalidInputError(f"pressure must be finite and > 0, got {pressure!r}")
    p0 = _p0_of(ref)
    t_k = _kelvin(temperature)
    h = (t_k / consts.lapse_rate) * (1.0 - (p / p0) ** consts.kappa)
    return _maybe_scalar(h)


def _height_scalar(p: float, t_c: float, p0, consts: IsaConstants) -> float:
    if not (math.isfinite(p) and p > 0):
        raise InvalidInputError(f"pressure must be finite and > 0, got {p!r}")
    if not (math.isfinite(p0) and p0 > 0):
        raise InvalidInputError(f"reference pressure must be finite and > 0, got {p0!r}")
    t_k = t_c + KELVIN_OFFSET
    if not (math.isfinite(t_k) and t_k > 0):
        raise InvalidInputError(f"temperature must be finite and above absolute zero, got {t_c!r}")
    return (t_k / consts.lapse_rate) * (1.0 - (p / p0) ** consts.kappa)


def height_to_pressure(height, temperature, ref=STANDARD_P0_HPA, consts: IsaConstants = DEFAULT_CONSTANTS):
    """Inverse of :func:`pressure_to_height` for fixed temperature and reference."""
    h = np.asarray(height, dtype=float)
    if not np.all(np.isfinite(h)):
        raise InvalidInputError(f"height must be finite, got {height!r}")
    p0 = _p0_of(ref)
    t_k = _kelvin(temperature)
    base = 1.0 - h * consts.lapse_rate / t_k
    if not np.all(base > 0):
        raise OutOfDomainError(f"height {height!r} beyond the tropospheric closed form")
    return _maybe_scalar(p0 * base ** (1.0 / consts.kappa))


def differential_height(base: SensorSample, mobile: SensorSample, ref=STANDARD_P0_HPA,
                        consts: IsaConstants = DEFAULT_CONSTANTS) -> float:
    """Height of ``mobile`` above ``base``; both samples already calibrated.

    Each height uses its own sensor's temperature and both share ``ref``.
    """
    h_m = pressure_to_height(mobile.pressure, mobile.temperature, ref, consts)
    h_b = pressure_to_height(base.pressure, base.temperature, ref, consts)
    return h_m - h_b


def floor_index(delta_h: float, plan: FloorPlan | Sequence[float]) -> tuple[int, str]:
    """Nearest floor to ``delta_h``; ties within ``FLOOR_TIE_TOL_M`` go to the lower index."""
    if isinstance(plan, FloorPlan):
        entries = plan.entries
    else:
        entries = tuple((f"F{k}", float(h)) for k, h in enumerate(plan))
    if not entries:
        raise InvalidInputError("floor plan is empty")
    if not math.isfinite(delta_h):
        raise InvalidInputError(f"delta_h must be finite, got {delta_h!r}")
    best = 0
    best_d = abs(delta_h - entries[0][1])
    for k in range(1, len(entries)):
        d = abs(delta_h - entries[k][1])
        if d < best_d - FLOOR_TIE_TOL_M:
            best, best_d = k, d
    return best, entries[best][0]


DEFAULT_PERTURBATIONS = {"lapse_rate": 0.10, "gas_constant": 0.005, "gravity": 0.005}


def isa_sensitivity(scenario: Iterable[Sequence[float]],
                    perturbations: Mapping[str, float] = DEFAULT_PERTURBATIONS,
                    ref=STANDARD_P0_HPA, consts: IsaConstants = DEFAULT_CONSTANTS,
                    steps: int = 5) -> float:
    """Largest |change in delta_h| when the ISA constants are perturbed.

    ``scenario`` rows are ``(P_b, T_b, P_m, T_m)``. ``perturbations`` maps a
    constant name to a relative half-width; each range is sampled at ``steps``
    evenly spaced points (endpoints included) and all combinations are tried.
    """
    rows = np.asarray(list(scenario), dtype=float).reshape(-1, 4)
    if rows.size == 0:
        return 0.0
    unknown = set(perturbations) - set(DEFAULT_PERTURBATIONS)
    if unknown:
        raise InvalidInputError(f"unknown constants {sorted(unknown)}")
    pb, tb, pm, tm = rows.T

    def dh(c):
        return pressure_to_height(pm, tm, ref, c) - pressure_to_height(pb, tb, ref, c)

    nominal = dh(consts)
    axes = []
    for name in ("lapse_rate", "gas_constant", "gravity"):
        frac = float(perturbations.get(name, 0.0))
        if frac < 0 or not math.isfinite(frac):
            raise InvalidInputError(f"perturbation for {name} must be >= 0")
        axes.append(np.linspace(1 - frac, 1 + frac, steps) if frac > 0 else np.array([1.0]))
    worst = 0.0
    for fl, fr, fg in itertools.product(*axes):
        dev = np.max(np.abs(dh(consts.scaled(fl, fr, fg)) - nominal))
        worst = max(worst, float(dev))
    return worst


def sensitivity_scenario(max_dh: float = 15.0, n_heights: int = 31,
                         temperatures=(0.0, 15.0, 30.0), ref=STANDARD_P0_HPA,
                         base_pressures=(STANDARD_P0_HPA,),
                         consts: IsaConstants = DEFAULT_CONSTANTS) -> list[tuple[float, float, float, float]]:
    """Grid of ``(P_b, T_b, P_m, T_m)`` rows with |delta_h| <= ``max_dh`` under nominal constants."""
    rows = []
    for pb in base_pressures:
        for t in temperatures:
            hb = pressure_to_height(pb, t, ref, consts)
            for dh in np.linspace(-max_dh, max_dh, n_heights):
                pm = height_to_pressure(hb + dh, t, ref, consts)
                rows.append((float(pb), float(t), float(pm), float(t)))
    return rows
