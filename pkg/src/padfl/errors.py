"""Exception types shared across the package."""


class PadflError(Exception):
    pass


class DimensionError(PadflError, ValueError):
    """Tensor/layer geometry mismatch."""


class ConfigurationError(PadflError, ValueError):
    """Invalid coefficients, widths, or run configuration."""


class FormatError(PadflError, ValueError):
    """Malformed binary or text input file."""


class NumericError(PadflError, ArithmeticError):
    """Non-finite value produced where a finite one is required."""
