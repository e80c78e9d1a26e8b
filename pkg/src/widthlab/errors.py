"""Exception types shared across widthlab modules."""


class FormatError(ValueError):
    """A binary stream does not match the expected file format."""


class LengthError(FormatError):
    """A payload is shorter than its declared dimensions require."""


class ConsistencyError(ValueError):
    """Two inputs that must agree (e.g. image and label counts) do not."""


class ConfigError(ValueError):
    """An experiment configuration value is out of its allowed range."""


class NumericError(RuntimeError):
    """A computation produced non-finite values; carries diagnostics."""


class DegenerateLayerError(RuntimeError):
    """A norm ratio is undefined because its denominator is ~0."""
