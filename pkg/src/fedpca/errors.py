"""Exception hierarchy shared by every module."""


class FedPCAError(Exception):
    """Base class for all package errors."""


class DimensionError(FedPCAError, ValueError):
    """Operand shapes do not conform."""


class DegenerateFactorizationError(FedPCAError, ArithmeticError):
    """A factorization met a (numerically) rank-deficient input."""


class DegenerateStepError(DegenerateFactorizationError):
    """A retraction step collapsed the basis; retry with a smaller step."""


class ConfigurationError(FedPCAError, ValueError):
    """Invalid configuration value or combination."""


class DivergenceError(FedPCAError, ArithmeticError):
    """An iterative solver produced a non-finite value."""

    def __init__(self, message, round_index=None):
        if round_index is not None:
            message = f"round {round_index}: {message}"
        super().__init__(message)
        self.round_index = round_index


class DataFormatError(FedPCAError, ValueError):
    """Malformed input file."""


class ManifestMismatchError(FedPCAError, ValueError):
    """A model and a dataset cache were built from different feature manifests."""


class CheckFailure(FedPCAError, AssertionError):
    """A numerical check found a counterexample."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
