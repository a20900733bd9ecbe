"""Differential barometric altimetry: ISA conversions, multi-sensor offset
calibration, a base/mobile streaming pair, a simulator and an evaluation CLI."""

from .atmo import (
    AltitudeEstimate,
    AtmosphereReference,
    FloorPlan,
    IsaConstants,
    SensorSample,
    differential_height,
    floor_index,
    height_to_pressure,
    isa_sensitivity,
    pressure_to_height,
)
from .calib import CalibrationTable, apply_calibration, calibrate, estimate_offsets, inner_join, jump_filter, resample
from .errors import BaroError, DataFormatError, InsufficientDataError, InvalidInputError, MissingCalibrationError

__version__ = "0.1.0"

__all__ = [
    "AltitudeEstimate",
    "AtmosphereReference",
    "BaroError",
    "CalibrationTable",
    "DataFormatError",
    "FloorPlan",
    "InsufficientDataError",
    "InvalidInputError",
    "IsaConstants",
    "MissingCalibrationError",
    "SensorSample",
    "apply_calibration",
    "calibrate",
    "differential_height",
    "estimate_offsets",
    "floor_index",
    "height_to_pressure",
    "inner_join",
    "isa_sensitivity",
    "jump_filter",
    "pressure_to_height",
    "resample",
]
