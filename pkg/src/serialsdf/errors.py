"""Exception types shared across the package.

Every error carries a short ``category`` string; the command line prints it so
callers can branch on the failure kind without parsing messages.
"""


class SerialSDFError(Exception):
    category = "error"


class OutOfRange(SerialSDFError, ValueError):
    category = "out_of_range"

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class EmptyCloud(SerialSDFError, ValueError):
    category = "empty_cloud"


class ZeroDenominator(SerialSDFError, ZeroDivisionError):
    category = "zero_denominator"


class NoSupport(SerialSDFError):
    """Raised when a query has no neighbors at any level."""

    category = "no_support"


class AllUnsupported(SerialSDFError):
    category = "all_unsupported"


class NonFiniteLoss(SerialSDFError, FloatingPointError):
    category = "non_finite_loss"

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class EmptyMesh(SerialSDFError, ValueError):
    category = "empty_mesh"


class EmptySet(SerialSDFError, ValueError):
    category = "empty_set"


class ParseError(SerialSDFError, ValueError):
    category = "parse_error"


class UnsupportedFormat(SerialSDFError, ValueError):
    category = "unsupported_format"


class InvalidSpec(SerialSDFError, ValueError):
    category = "invalid_spec"


class InvalidConfig(SerialSDFError, ValueError):
    category = "invalid_config"
