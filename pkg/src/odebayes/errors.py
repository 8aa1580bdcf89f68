"""Exception types raised across the package."""


class OdeBayesError(Exception):
    """Base class for all package errors."""


class SolverError(OdeBayesError):
    """Base class for integration failures."""


class MaxStepsExceeded(SolverError):
    """The integrator hit its step budget (usually a stiff or blow-up region)."""


class NonFiniteState(SolverError):
    """The right-hand side produced NaN or Inf."""


class OutOfBounds(OdeBayesError, ValueError):
    """A constrained parameter lies on or outside its bounds."""


class DimensionMismatch(OdeBayesError, ValueError):
    pass


class ConfigError(OdeBayesError, ValueError):
    pass


class InitFailure(OdeBayesError):
    """No finite initial point was found for a chain."""


class DegenerateChainError(OdeBayesError, ValueError):
    """A chain has zero variance, so R-hat and ESS are undefined."""


class LabelMismatch(OdeBayesError, ValueError):
    pass


class UnknownOverride(OdeBayesError, KeyError):
    pass


class DataFormatError(OdeBayesError, ValueError):
    """A data file could not be parsed; the message names file and line."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")
