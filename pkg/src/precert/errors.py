"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes, so keep the grouping stable.
"""


class PrecertError(Exception):
    """Base class for every error raised by this package."""


class NormalizationError(PrecertError, ValueError):
    """Amplitudes or matrices that should be normalized are not."""


class DomainError(PrecertError, ValueError):
    """Input outside the mathematical domain of an operation."""


class ChannelNotTPError(PrecertError, ValueError):
    """A chi matrix that must be trace preserving is not."""


class UndefinedConditionalStateError(PrecertError, ValueError):
    """Projection outcome has (numerically) zero probability."""


class UndefinedHeraldingError(PrecertError, ValueError):
    """Heralding efficiency requested with neither flag nor dark clicks."""


class UnreachableThresholdError(PrecertError):
    """Heralding efficiency never crosses the requested threshold."""


class EstimationError(PrecertError):
    """Maximum-likelihood reconstruction failed.

    ``diagnostics`` carries the last iterate, its log-likelihood and the
    iteration count so callers can decide what to do with a failed fit.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class RankDeficiencyError(EstimationError):
    """Measurement record does not span the operator space."""


class BootstrapError(EstimationError):
    """Too many bootstrap resamples failed (or the data set is empty)."""


class CalibrationError(PrecertError):
    """Noise model cannot reproduce the requested fidelities."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class SpecParseError(PrecertError):
    """Experiment spec file is not valid TOML."""

    def __init__(self, message, line=None, column=None):
        super().__init__(message)
        self.line = line
        self.column = column


class SpecValidationError(PrecertError, ValueError):
    """Experiment spec parsed but violates a field constraint."""

    def __init__(self, field, constraint):
        super().__init__(f"{field}: {constraint}")
        self.field = field
        self.constraint = constraint
