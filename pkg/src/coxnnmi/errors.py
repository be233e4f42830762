"""Exception hierarchy shared by the estimators, the I/O layer and the CLI."""


class CoxMissError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(CoxMissError, ValueError):
    pass


class NoEvents(CoxMissError, ValueError):
    pass


class Diverged(CoxMissError):
    """Solver left the coefficient bound or ran out of iterations.

    ``beta`` and ``n_iter`` describe the last iterate so callers that only
    count divergences can still log where the solver ended up.
    """

    def __init__(self, message, beta=None, n_iter=None):
        super().__init__(message)
        self.beta = beta
        self.n_iter = n_iter


class SingularInformation(CoxMissError):
    pass


class SingularDesign(CoxMissError):
    pass


class Separation(CoxMissError):
    pass


class DegenerateOutcome(Separation):
    """Binary response takes a single value, so no GLM can be fitted."""


class EmptyCompleteSet(CoxMissError):
    pass


class TooManyFailures(CoxMissError):
    pass


class DegenerateScore(CoxMissError):
    pass


class EmptyDonorPool(CoxMissError):
    pass


class ImputationFailed(CoxMissError):
    def __init__(self, message, replicate=None):
        super().__init__(message)
        self.replicate = replicate


class ParseError(CoxMissError, ValueError):
    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class NegativeTime(ParseError):
    pass


class UnknownLevel(ParseError):
    pass


class ConfigError(CoxMissError, ValueError):
    pass
