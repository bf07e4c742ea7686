"""Exception taxonomy shared across the package."""


class RenderPipeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(RenderPipeError):
    """A shape, size, or option is inconsistent with what an operation requires."""


class DataError(RenderPipeError):
    """A file, manifest, or serialized blob could not be read or parsed."""


class NumericalError(RenderPipeError):
    """A computation produced non-finite values or failed a numerical check."""
