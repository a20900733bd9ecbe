"""Exception types shared across the package."""


class BaroError(Exception):
    """Base class for all package errors."""


class InvalidInputError(BaroError, ValueError):
    """Non-finite, non-positive or otherwise unusable input."""


class OutOfDomainError(InvalidInputError):
    """Input outside the domain where the ISA closed form is defined."""


class InsufficientDataError(BaroError):
    """Not enough aligned rows to estimate anything."""


class MissingCalibrationError(BaroError, KeyError):
    """A sensor id has no entry in the calibration table."""

    def __str__(self):
        return Exception.__str__(self)


class DataFormatError(BaroError, ValueError):
    """Malformed file content. Carries the path and 1-based line number when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
