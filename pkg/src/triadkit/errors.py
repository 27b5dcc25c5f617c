"""Exception hierarchy.

Every error raised by the library derives from :class:`TriadError` and carries
an ``exit_code`` used by the command line front end.
"""


class TriadError(Exception):
    exit_code = 1


class ConfigError(TriadError):
    exit_code = 2


class FormatError(TriadError):
    """Input file does not match its declared format."""

    exit_code = 3


class IntegrityError(TriadError):
    """Input file is well formed but internally inconsistent."""

    exit_code = 3


class ArgumentError(TriadError, ValueError):
    exit_code = 4


class UndefinedMetricError(ArgumentError):
    pass


class BudgetError(TriadError):
    exit_code = 5

    def __init__(self, total, budget):
        self.total = total
        self.budget = budget
        self.excess = total - budget
        super().__init__(
            f"visual token layout needs {total} tokens, budget is {budget} "
            f"(excess {self.excess})"
        )


class EditError(TriadError, ValueError):
    exit_code = 4


class UnmatchedLabelError(TriadError):
    exit_code = 6


class GenerationError(TriadError):
    exit_code = 6


class RetryableError(GenerationError):
    """Transport-level failure from a generation backend."""

    def __init__(self, message, attempts=1):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempt(s))")


class ScoringError(TriadError):
    exit_code = 7


class OutputError(TriadError, OSError):
    exit_code = 8
