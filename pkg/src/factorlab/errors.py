"""Exception types shared across the package."""


class FactorLabError(Exception):
    """Base class for all package errors."""


class ParseError(FactorLabError):
    """Formula text could not be parsed or failed validation.

    ``offset`` is the character position of the problem in the source text.
    """

    def __init__(self, message: str, offset: int = 0, text: str = ""):
        self.offset = offset
        self.text = text
        super().__init__(f"{message} (at offset {offset})")


class DataError(FactorLabError):
    """Input data violates a panel invariant."""


class CSVFormatError(DataError):
    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")


class EvaluationError(FactorLabError):
    """An expression could not be evaluated against a panel."""


class UndefinedResultError(FactorLabError):
    """A statistic is mathematically undefined for the given input."""


class IntegrityError(FactorLabError):
    """A persisted library violates the pairwise correlation constraint."""


class ConflictError(FactorLabError):
    """A decision was applied to a library that changed since it was made."""


class GenerationError(FactorLabError):
    """A candidate sampler could not produce valid expressions."""


class ConfigError(FactorLabError):
    """Run configuration failed schema validation."""
