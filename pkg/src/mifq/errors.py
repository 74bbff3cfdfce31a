"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid hyper-parameter or run configuration."""


class DimensionError(ValueError):
    """Operand shapes do not line up."""


class GradientError(RuntimeError):
    """Backward pass requested on something that cannot be differentiated."""


class EnvError(RuntimeError):
    """Illegal use of an environment (bad action, stepping a finished episode)."""


class NotTabularError(TypeError):
    """An exact-model operation was requested on a non-tabular environment."""


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class FormatError(ValueError):
    """A file does not follow its on-disk contract."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IncompatibleDemosError(FormatError):
    """Demonstrations were recorded on a different environment spec."""


class MetricsLockError(RuntimeError):
    """Another writer already holds the metrics file."""
