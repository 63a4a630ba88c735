"""Exception hierarchy shared by every stage.

All errors derive from ``ValueError`` through ``DomdBenchError`` so callers that only
care about bad input can keep catching ``ValueError``. The CLI maps the whole family to
exit code 1.
"""

from typing import Optional


class DomdBenchError(ValueError):
    """Base class for invalid input or parameters."""


class BehindCameraError(DomdBenchError):
    """A point with non-positive z was projected."""


class InvalidDepthError(DomdBenchError):
    """A non-positive or non-finite depth was backprojected."""


class SpecInvalidError(DomdBenchError):
    """A scene description violates its invariants."""


class ParameterError(DomdBenchError):
    """A numeric parameter is out of range."""


class PriorCoverageError(DomdBenchError):
    """The depth prior is invalid on a pixel that must be splatted."""


class EmptySupportError(DomdBenchError):
    """An evaluation was requested over an empty pixel set."""


class DomainError(DomdBenchError):
    """A function was evaluated outside its mathematical domain."""


class InputValidationError(DomdBenchError):
    """Inputs to a pipeline are mutually inconsistent."""


class ConfigError(DomdBenchError):
    """A configuration file could not be parsed or validated."""

    def __init__(
        self,
        message: str,
        path: Optional[str] = None,
        line: Optional[int] = None,
        key: Optional[str] = None,
    ):
        self.path = path
        self.line = line
        self.key = key
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")
