"""Error types shared by every inrhsi module.

Each error carries the process exit code the CLI reports for it.
"""

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class InrHsiError(RuntimeError):
    exit_code = EXIT_DATA


class ConfigurationError(InrHsiError):
    exit_code = EXIT_USAGE


class DimensionError(InrHsiError):
    pass


class NumericError(InrHsiError):
    exit_code = EXIT_NUMERIC


class PrecisionError(InrHsiError):
    exit_code = EXIT_NUMERIC


class EncodingDomainError(InrHsiError):
    pass


class LayoutError(InrHsiError):
    pass


class FormatError(InrHsiError):
    """Malformed container or checkpoint; `offset` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SampleSizeError(InrHsiError):
    pass


class InputError(InrHsiError):
    pass


class CompatibilityError(InrHsiError):
    pass


class BandIndexError(InrHsiError, IndexError):
    pass
