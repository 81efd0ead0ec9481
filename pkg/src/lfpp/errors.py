"""Exception hierarchy; one class per failure signal."""


class LFPPError(Exception):
    """Base class for all errors raised by the package."""


class DomainError(LFPPError, ValueError):
    """A parameter lies outside the domain where a formula is defined."""


class ResourceLimitError(LFPPError, MemoryError):
    """The requested grid would exceed the configured memory cap."""


class InvalidResolutionError(LFPPError, ValueError):
    pass


class IncompatibleSamplesError(LFPPError, ValueError):
    pass


class MalformedPathError(LFPPError, ValueError):
    pass


class DisconnectedError(LFPPError):
    """No region-confined path joins the source and target sets."""


class InvalidQueryError(LFPPError, ValueError):
    pass


class OracleSizeLimitError(LFPPError, ValueError):
    pass


class ParameterOrderError(LFPPError, ValueError):
    pass


class UnderdeterminedFitError(LFPPError, ValueError):
    pass


class GridSpacingError(LFPPError, ValueError):
    pass


class ExcludedPointError(LFPPError, ValueError):
    pass


class IncompatibleEstimatesError(LFPPError, ValueError):
    pass


class InconsistentLambdaError(LFPPError):
    """The supplied exponent function admits no fixed point for d_gamma."""


class OutsideSubcriticalError(LFPPError, ValueError):
    pass


class BracketFailureError(LFPPError):
    pass


class ChecksumMismatchError(LFPPError):
    """A result store no longer matches its recorded digest."""
