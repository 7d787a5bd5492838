"""Exception types shared across the package.

Each maps to one CLI exit code (see cli.EXIT_*): invalid input and file-format
problems exit 3, numerical guards exit 4, I/O failures exit 5.
"""


class InvalidInputError(ValueError):
    """Caller violated an argument contract (shape, finiteness, range)."""


class DegenerateRegionError(InvalidInputError):
    """A pixel region collapsed to zero extent (or too few keypoints)."""


class SingularTriangleError(InvalidInputError):
    """Triangle with |signed area| below the degeneracy threshold."""


class NumericalGuardError(ArithmeticError):
    """A numeric guard tripped (non-finite loss, diverged training run)."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class FormatError(ValueError):
    """A serialized artifact failed validation.

    `code` is a stable machine-readable identifier; `offset` is the byte
    offset at which a binary parse failed, when that is meaningful.
    """

    def __init__(self, code: str, message: str, offset: int | None = None):
        super().__init__(message)
        self.code = code
        self.offset = offset
