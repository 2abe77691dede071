"""Exception hierarchy. Each family maps onto a CLI exit code."""


class BayesMortError(Exception):
    exit_code = 1


class ValidationError(BayesMortError, ValueError):
    """Bad arguments or configuration."""

    exit_code = 2


class DataError(BayesMortError, ValueError):
    """Input data violates a structural or domain invariant."""

    exit_code = 3


class IngestionError(DataError):
    pass


class NumericalError(BayesMortError, ArithmeticError):
    """A factorization or optimizer failed in a way that should not happen."""

    exit_code = 4
