from __future__ import annotations


class ToolkitError(Exception):
    """Base class for every error the toolkit raises on purpose."""

    exit_code = 2


class UsageError(ToolkitError, ValueError):
    exit_code = 1


class ConfigError(UsageError):
    pass


class DataError(ToolkitError, ValueError):
    exit_code = 2


class RecordRejected(DataError):
    """A single input record failed validation; pipelines count it and move on."""

    def __init__(self, reason: str, record_id: str | None = None, detail: str = "") -> None:
        self.reason = reason
        self.record_id = record_id
        self.detail = detail
        super().__init__(f"record {record_id!r} rejected: {reason} {detail}".strip())


class ShardFormatError(DataError):
    def __init__(
        self,
        message: str,
        path: str,
        offset: int,
        record_index: int | None = None,
    ) -> None:
        self.path = path
        self.offset = offset
        self.record_index = record_index
        where = f"offset={offset}"
        if record_index is not None:
            where += f" record={record_index}"
        super().__init__(f"{path}: {message} ({where})")


class CheckpointError(DataError):
    pass


class NumericError(ToolkitError, ArithmeticError):
    exit_code = 3
