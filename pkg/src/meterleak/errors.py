"""Exception types shared across the package."""


class MeterLeakError(Exception):
    """Base class for all package errors."""


class ValidationError(MeterLeakError, ValueError):
    """An input distribution, kernel or joint failed validation."""


class NonConvergenceError(MeterLeakError, RuntimeError):
    """An iterative solver hit its iteration cap.

    The last iterate is kept so callers can inspect or reuse it.
    """

    def __init__(self, message, *, iterate=None, iterations=None, gap=None):
        super().__init__(message)
        self.iterate = iterate
        self.iterations = iterations
        self.gap = gap


class ConfigurationError(MeterLeakError, ValueError):
    """A simulation or experiment configuration is inconsistent."""


class InstanceTooLargeError(MeterLeakError, ValueError):
    """A brute-force oracle refused an instance it cannot enumerate."""


class TraceFormatError(MeterLeakError, ValueError):
    """A load trace file could not be parsed."""

    def __init__(self, message, *, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ResultIOError(MeterLeakError, OSError):
    """Reading or writing a result file failed."""

    def __init__(self, message, *, path=None):
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path
