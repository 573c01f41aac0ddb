"""
Exception hierarchy of the calibration package.

Every error raised on purpose by the library derives from CalibrationError,
so that the command-line layer can catch a single type and report it cleanly.
"""


class CalibrationError(Exception):
    """Root of all errors raised by rqe_calib."""


class InvalidInputError(CalibrationError, ValueError):
    """A value is non-finite, out of its domain, or a covariance is not PSD."""


class AlignmentError(CalibrationError):
    """
    Scans and poses are not paired one-to-one by timestamp.

    Attributes:
        index (int): Index of the first scan/pose pair that does not match.
    """
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class EmptyCloudError(CalibrationError):
    """A cost was requested on a cloud holding no points."""


class PreconditionError(CalibrationError):
    """The inputs of a pipeline stage do not meet its preconditions."""


class OptimizationFailedError(CalibrationError):
    """
    An optimizer could not produce a usable result.

    Attributes:
        trace (list): The (eval index, cost) records gathered before failing.
    """
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class ExtrapolationError(CalibrationError):
    """
    A pose was requested outside the time span of the trajectory.

    Attributes:
        t (float): The requested timestamp.
    """
    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class TimeAlignmentError(CalibrationError):
    """No candidate time offset could be evaluated."""


class TrajectoryError(CalibrationError):
    """A trajectory leaves the free space of its environment."""


class UnknownEnvironmentError(CalibrationError, KeyError):
    """The requested simulation environment does not exist."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class FileFormatError(CalibrationError):
    """
    A data file could not be parsed.

    Attributes:
        path (str): The offending file.
        line (int): 1-based line number, when known.
    """
    def __init__(self, message, path=None, line=None):
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f":{line}"
            location += ": "
        super().__init__(location + message)
        self.path = path
        self.line = line


class OrderingError(FileFormatError):
    """Timestamps in a data file are not in the required order."""


class ConfigError(CalibrationError):
    """A configuration file holds unknown, duplicate or malformed keys."""
