"""Exception hierarchy.

Every error carries a short machine name (``code``) that the CLI prints as
``error=<code>``.  Validation problems derive from :class:`ValidationError`
(exit code 2), file-format problems from :class:`FormatError` (also exit 2,
since a wrong or damaged input is a caller error, not an I/O failure).
"""

from __future__ import annotations


class CuratreeError(Exception):
    code = "CuratreeError"

    def __init__(self, message: str = "", **fields):
        self.fields = fields
        super().__init__(message or self.code)


class ValidationError(CuratreeError, ValueError):
    code = "ValidationError"


class FormatError(CuratreeError):
    code = "FormatError"


class InvariantViolation(CuratreeError, AssertionError):
    code = "InvariantViolation"


# embedding_store
class BadMagic(FormatError):
    code = "BadMagic"


class TruncatedFile(FormatError):
    code = "TruncatedFile"


class UnsupportedDtype(FormatError):
    code = "UnsupportedDtype"


class NonFiniteValue(ValidationError):
    code = "NonFiniteValue"

    def __init__(self, row: int, message: str = ""):
        self.row = row
        super().__init__(message or f"non-finite value in row {row}", row=row)


class ZeroNormRow(ValidationError):
    code = "ZeroNormRow"

    def __init__(self, row: int, message: str = ""):
        self.row = row
        super().__init__(message or f"row {row} has zero L2 norm", row=row)


class CountMismatch(ValidationError):
    code = "CountMismatch"


class MalformedRecord(ValidationError):
    code = "MalformedRecord"

    def __init__(self, line: int, message: str = ""):
        self.line = line
        super().__init__(f"line {line}: {message}" if message else f"line {line}", line=line)


class DuplicateRowIndex(ValidationError):
    code = "DuplicateRowIndex"


# kmeans_core / hierarchy
class TooFewRows(ValidationError):
    code = "TooFewRows"


class DimensionMismatch(ValidationError):
    code = "DimensionMismatch"


class InvalidConfig(ValidationError):
    code = "InvalidConfig"


class VersionMismatch(FormatError):
    code = "VersionMismatch"


class CorruptSection(FormatError):
    code = "CorruptSection"

    def __init__(self, section: str, message: str = ""):
        self.section = section
        super().__init__(
            f"section {section}: {message}" if message else f"section {section}",
            section=section,
        )


class IndexOutOfRange(ValidationError, IndexError):
    code = "IndexOutOfRange"


# curation_sampler
class InvalidInput(ValidationError):
    code = "InvalidInput"


class InvalidLevel(ValidationError):
    code = "InvalidLevel"


class TargetExceedsData(ValidationError):
    code = "TargetExceedsData"


# batch_stratifier
class EmptySubset(ValidationError):
    code = "EmptySubset"


class BatchTooSmall(ValidationError):
    code = "BatchTooSmall"


class BatchTooLarge(ValidationError):
    code = "BatchTooLarge"


# diagnostics
class InvalidProportions(ValidationError):
    code = "InvalidProportions"


class LengthMismatch(ValidationError):
    code = "LengthMismatch"


class InvalidParams(ValidationError):
    code = "InvalidParams"
