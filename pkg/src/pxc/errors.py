"""Exception hierarchy shared across the toolkit.

Everything raised on purpose derives from PxcError so callers can catch one
type at the CLI boundary and map it to an exit code.
"""


class PxcError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PxcError):
    """Invalid, missing, or inconsistent configuration value."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"config key '{key}': {message}")


class InvalidInputError(PxcError):
    """Input tensor or image violates a documented precondition."""


class DimensionError(InvalidInputError):
    """Shape mismatch between tensors that must agree."""


class UnsupportedSizeError(InvalidInputError):
    """Image dimensions outside what the bitstream header can carry."""


class ExternalToolError(PxcError):
    """External quality tool failed (non-zero exit, bad output)."""

    def __init__(self, message, stdout="", stderr=""):
        self.stdout = stdout
        self.stderr = stderr
        super().__init__(message)


class ExternalToolTimeout(ExternalToolError):
    """External quality tool exceeded its time budget."""


class TrainingDivergenceError(PxcError):
    """Non-finite loss encountered; the offending step was not applied."""

    def __init__(self, message, step=None, phase=None):
        self.step = step
        self.phase = phase
        super().__init__(message)


class CorruptStreamError(PxcError):
    """Bitstream or checkpoint bytes fail structural validation."""


class WrongModelError(PxcError):
    """Bitstream was produced by a different model than the one loaded."""


class NoOverlapError(PxcError):
    """Rate-distortion curves share no quality range to integrate over."""

    def __init__(self, ref_range, test_range):
        self.ref_range = ref_range
        self.test_range = test_range
        super().__init__(
            "no quality overlap between curves: "
            f"reference spans {ref_range}, test spans {test_range}"
        )
