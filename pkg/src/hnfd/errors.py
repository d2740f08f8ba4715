"""Exception hierarchy shared across the package."""


class HNFDError(Exception):
    """Base class for all package errors."""


class ConfigError(HNFDError, ValueError):
    """Invalid field, training or run configuration."""


class InputError(HNFDError, ValueError):
    """Non-finite or otherwise unusable query input."""


class FormatError(HNFDError, ValueError):
    """Malformed checkpoint or point-set file."""


class NumericError(HNFDError, ArithmeticError):
    """A loss or gradient became non-finite."""


class DegenerateNeighborhoodError(HNFDError, ArithmeticError):
    """Least-squares design stayed singular after Tikhonov jitter."""


class SearchError(HNFDError, RuntimeError):
    """Every hyperparameter candidate produced a non-finite objective."""


class TrainingError(HNFDError, RuntimeError):
    """Training diverged (loss above 1e6 or non-finite)."""


class UndefinedPointError(HNFDError, ValueError):
    """Query on the medial axis, where a closed form is undefined."""


class SamplingError(HNFDError, RuntimeError):
    """Surface projection did not converge."""


class MetricError(HNFDError, ValueError):
    """Metric called on empty or mismatched inputs."""


class StepError(HNFDError, RuntimeError):
    """An advection refit diverged; the run is treated as crashed."""
