"""Exception types shared across the package."""


class FosrError(Exception):
    """Base class for all package-specific errors."""


class DataError(FosrError):
    """Malformed or inconsistent input data (maps to CLI exit code 2)."""


class NumericalError(FosrError):
    """A numerical procedure failed: singular system, failed factorization,
    no usable eigenvalues (maps to CLI exit code 3)."""


class StageFailure(FosrError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage: str, original: BaseException):
        self.stage = stage
        self.original = original
        super().__init__(f"[stage: {stage}] {original}")
