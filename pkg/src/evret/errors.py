"""Exception types shared across the package."""

from __future__ import annotations


class EvretError(Exception):
    """Base class for all package errors."""


class IngestError(EvretError):
    """A referenced corpus file is missing or unreadable."""

    def __init__(self, path, detail: str = "missing or unreadable"):
        self.path = str(path)
        super().__init__(f"{self.path}: {detail}")


class FormatError(EvretError):
    """An on-disk artifact violates the binary or JSONL format contract."""

    def __init__(self, field: str, expected, found):
        self.field = field
        self.expected = expected
        self.found = found
        super().__init__(f"field {field!r}: expected {expected!r}, found {found!r}")


class ValidationError(EvretError):
    """A loaded record violates a corpus invariant."""

    def __init__(self, record_id: str, rule: str):
        self.record_id = record_id
        self.rule = rule
        super().__init__(f"record {record_id!r}: {rule}")


class ArgumentError(EvretError):
    """An operation was called with out-of-contract arguments."""


class ShapeError(EvretError):
    """Array arguments have incompatible shapes."""


class NumericError(EvretError):
    """A numeric input or result is non-finite."""


class TrainingError(EvretError):
    """Training diverged (non-finite loss)."""

    def __init__(self, step: int, detail: str = "non-finite loss"):
        self.step = step
        super().__init__(f"step {step}: {detail}")


class ConfigError(EvretError):
    """Base class for run-configuration errors."""


class UnknownKeyError(ConfigError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(f"unknown config key {key!r}")


class TypeMismatchError(ConfigError):
    def __init__(self, key: str, detail: str):
        self.key = key
        super().__init__(f"config key {key!r}: {detail}")


class MissingRequiredError(ConfigError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(f"missing required config key {key!r}")
