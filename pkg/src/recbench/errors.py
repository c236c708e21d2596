"""Exception hierarchy shared by all recbench modules."""


class RecbenchError(Exception):
    """Base class for toolkit errors."""


class ParseError(RecbenchError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvariantError(RecbenchError, ValueError):
    """A checked constructor rejected its inputs."""


class FetchError(RecbenchError):
    """Downloading raw files failed. Safe to retry."""

    retryable = True


class CorruptDataError(RecbenchError):
    """A cached or downloaded file failed an integrity check."""


class LeakageError(RecbenchError):
    def __init__(self, pairs):
        self.pairs = list(pairs)
        shown = ", ".join(f"({u},{i})" for u, i in self.pairs[:10])
        more = "" if len(self.pairs) <= 10 else f" ... ({len(self.pairs)} total)"
        super().__init__(f"pairs present in both train and test: {shown}{more}")


class UndefinedDensityError(RecbenchError, ZeroDivisionError):
    pass


class DimensionError(RecbenchError, ValueError):
    pass


class ExhaustionError(RecbenchError):
    """A user has no item left to sample as a negative."""


class PoisonedUpdateError(RecbenchError, FloatingPointError):
    """Non-finite gradient or parameter detected; the run must abort."""


class EmptyTrainingError(RecbenchError):
    """An epoch was requested on a store with no training positives."""


class ContextViolationError(RecbenchError):
    """Two runs from different evaluation contexts were compared."""


class UndefinedGainError(RecbenchError, ZeroDivisionError):
    pass


class MissingScoreError(RecbenchError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing score"


class MissingBaselineError(RecbenchError):
    pass


class EmptyEvaluationError(RecbenchError):
    """No user with a non-empty test row was available."""


class ContractError(RecbenchError, ValueError):
    pass


class BuildError(RecbenchError, ValueError):
    pass


class UsageError(RecbenchError):
    pass
