"""Exception hierarchy shared by every stage of the pipeline.

Exit codes follow the CLI contract: 2 validation, 3 numerical, 4 file/format.
Each class carries a short machine-readable ``code`` so tests and callers can
distinguish failure classes without parsing messages.
"""


class ModelTailorError(Exception):
    exit_code = 1
    code = "error"


class ValidationError(ModelTailorError):
    """Caller handed us inconsistent inputs (shapes, ranges, missing pieces)."""

    exit_code = 2
    code = "validation"


class ShapeError(ValidationError):
    code = "shape_mismatch"


class NumericalError(ModelTailorError):
    """The math could not proceed (indefinite matrix, dead pivot, divergence)."""

    exit_code = 3
    code = "numerical"


class DefinitenessError(NumericalError):
    code = "not_positive_definite"

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = pivot
        super().__init__(message or f"matrix is not positive definite (pivot {pivot})")


class SingularPivotError(NumericalError):
    code = "singular_pivot"


class DivergenceError(NumericalError):
    code = "diverged"

    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"training loss became non-finite at epoch {epoch}")


class FormatError(ModelTailorError):
    """Container file could not be read or written."""

    exit_code = 4
    code = "format"


class MagicError(FormatError):
    code = "bad_magic"


class VersionError(FormatError):
    code = "version_mismatch"


class HeaderError(FormatError):
    code = "bad_header"


class DuplicateNameError(HeaderError):
    code = "duplicate_name"


class TruncationError(FormatError):
    code = "truncated"


class OffsetError(FormatError):
    code = "bad_offset"


class SizeOverflowError(FormatError):
    code = "size_overflow"
