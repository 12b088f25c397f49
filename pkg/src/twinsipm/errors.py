"""Exception hierarchy shared by the simulator, estimators and CLI."""


class TwinSipmError(Exception):
    """Base class for all package errors."""


class DomainError(TwinSipmError, ValueError):
    """A parameter lies outside the domain of a model or formula."""


class UndefinedEstimateError(TwinSipmError, ValueError):
    """An estimator is undefined for the given data (e.g. zero mean)."""


class EstimationError(TwinSipmError, ValueError):
    """Data are inconsistent with the assumptions of an estimator."""


class InsufficientStatisticsError(TwinSipmError):
    """Too few selected shots to form a statistic."""

    def __init__(self, message, n_selected):
        super().__init__(message)
        self.n_selected = n_selected


class CascadeOverflowError(TwinSipmError, RuntimeError):
    """A single shot produced more events than the hard cap allows."""


class ConfigError(TwinSipmError, ValueError):
    """Invalid chain, experiment or run configuration."""


class DataError(TwinSipmError, ValueError):
    """Malformed external shot data."""
