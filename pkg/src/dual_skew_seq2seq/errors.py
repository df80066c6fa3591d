"""Exception hierarchy shared by every module of the laboratory."""

from typing import Optional


class LabError(Exception):
    """Base class for all errors raised by dual_skew_seq2seq."""


class ConfigError(LabError):
    """Invalid parameter or configuration value."""


class DataError(LabError):
    """Corpus, batch or index content that cannot be used."""


class DimensionError(LabError, ValueError):
    """Operands with incompatible shapes."""


class UsageError(LabError, ValueError):
    """An API called in a way it does not support."""


class NumericError(LabError, ValueError):
    """A value became non-finite."""

    def __init__(self, message: str, step: Optional[int] = None) -> None:
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class ParseError(DataError):
    """A malformed line in an input file."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None) -> None:
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where = f"{where}{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")
        self.path = path
        self.line = line
