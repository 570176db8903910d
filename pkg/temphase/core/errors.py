from __future__ import annotations


class TemphaseError(Exception):
    """Base class for domain errors raised by temphase."""


class ImageFormatError(TemphaseError):
    def __init__(self, message: str, *, byte_offset: int | None = None) -> None:
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class TruncatedDataError(ImageFormatError):
    pass


class UnsupportedModeError(TemphaseError):
    def __init__(self, mode: int) -> None:
        super().__init__(f"Unsupported MRC mode {mode}; expected one of 0, 1, 2, 6")
        self.mode = mode


class EmptyStackError(TemphaseError):
    pass


class DatabaseParseError(TemphaseError):
    def __init__(self, message: str, *, line_number: int | None = None) -> None:
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class DimensionMismatchError(TemphaseError):
    def __init__(self, expected: tuple[int, int], actual: tuple[int, int], what: str = "image") -> None:
        super().__init__(
            f"{what} dimensions {actual[0]}x{actual[1]} do not match expected {expected[0]}x{expected[1]}"
        )
        self.expected = expected
        self.actual = actual


class UndefinedSpacingError(TemphaseError):
    """Raised for the DC position, where the d-spacing is undefined."""
