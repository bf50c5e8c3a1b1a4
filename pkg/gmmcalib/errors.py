"""Exception hierarchy for gmm-calib."""


class CalibrationError(Exception):
    """Base class for every error raised by gmm-calib."""


class ConfigError(CalibrationError, ValueError):
    """A config or scene file is malformed, has unknown keys, or misses a seed."""


class RegistrationError(CalibrationError):
    """A registration solver could not produce a transform."""


class GimbalProximity(CalibrationError, ValueError):
    """Euler decomposition requested at or beyond the pitch = ±90° singularity."""


class EmptyInput(CalibrationError, ValueError):
    pass


class DegenerateMean(CalibrationError, ValueError):
    """The averaged rotation matrix is rank deficient."""


class EmptyCloud(CalibrationError, ValueError):
    pass


class TooFewPoints(CalibrationError, ValueError):
    pass


class ParseError(CalibrationError, ValueError):
    """A point cloud file could not be parsed.

    Args:
        message: Human readable description
        line: 1-based line number of the offending line, if known
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedFormat(CalibrationError, ValueError):
    pass


class InvalidObservationSet(CalibrationError, ValueError):
    pass


class InvalidComponentCount(CalibrationError, ValueError):
    pass


class NumericUnderflow(RegistrationError, ArithmeticError):
    """A point has zero likelihood under every component and the outlier term."""


class DegenerateAlignment(RegistrationError, ArithmeticError):
    """Weighted point covariance of an observation has rank < 2."""


class NoConvergence(RegistrationError):
    pass


class NoCorrespondences(RegistrationError):
    """No source point found a target point inside the correspondence gate."""


class DegenerateGeometry(RegistrationError, ArithmeticError):
    pass


class IllConditioned(RegistrationError, ArithmeticError):
    pass


class EmptyTargetRegion(CalibrationError, ValueError):
    pass


class MisalignedBookkeeping(CalibrationError, ValueError):
    pass


class EmptyModel(CalibrationError, ValueError):
    """No mixture component survives pruning."""


class RegistrationFailed(RegistrationError):
    """Registration produced no usable transform for any pair."""
