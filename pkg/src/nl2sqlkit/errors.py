"""Exception types shared across the toolkit."""

from __future__ import annotations


class NL2SQLKitError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(NL2SQLKitError, ValueError):
    pass


class CorpusError(NL2SQLKitError):
    pass


class ExampleParseError(CorpusError, ValueError):
    def __init__(self, message: str, index: int | None = None):
        self.index = index
        super().__init__(message if index is None else f"record {index}: {message}")


class SchemaValidationError(CorpusError, ValueError):
    pass


class SqlParseError(NL2SQLKitError, ValueError):
    pass


class UnsupportedConstruct(SqlParseError):
    """Raised when SQL falls outside the supported SELECT grammar."""

    def __init__(self, message: str, token: str, offset: int):
        self.token = token
        self.offset = offset
        super().__init__(f"unsupported construct at offset {offset} ({token!r}): {message}")


class LinkError(NL2SQLKitError, ValueError):
    pass


class AmbiguousColumn(LinkError):
    def __init__(self, column: str, candidates: list[str]):
        self.column = column
        self.candidates = candidates
        super().__init__(f"ambiguous column {column!r}; candidates: {', '.join(candidates)}")


class UnknownColumn(LinkError):
    def __init__(self, column: str, table: str | None = None):
        self.column = column
        self.table = table
        where = f" in table {table!r}" if table else ""
        super().__init__(f"unknown column {column!r}{where}")


class UnknownTable(LinkError):
    def __init__(self, table: str):
        self.table = table
        super().__init__(f"unknown table {table!r}")


class BudgetError(NL2SQLKitError, ValueError):
    pass


class OverBudgetError(BudgetError):
    pass


class TokenizerError(NL2SQLKitError, RuntimeError):
    pass


class BackendError(NL2SQLKitError, RuntimeError):
    def __init__(self, message: str, question_id=None):
        self.question_id = question_id
        super().__init__(message)


class FixtureMiss(BackendError):
    pass


class ExecutionError(NL2SQLKitError, RuntimeError):
    pass


class QueryTimeout(ExecutionError):
    pass


class RunError(NL2SQLKitError, RuntimeError):
    pass
