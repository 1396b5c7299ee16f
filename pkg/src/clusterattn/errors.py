"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes of the operands do not line up."""


class FormatError(ValueError):
    """A tensor or index file is malformed."""


class InvariantError(ValueError):
    """A structural invariant does not hold."""


class CalibrationError(ValueError):
    """Calibration cannot proceed with the data supplied."""


class NoKeysAttendedError(ValueError):
    """Attention was requested over an empty key set."""
