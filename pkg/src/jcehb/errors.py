"""Exception types raised across the package."""


class JcehbError(Exception):
    """Base class for package errors."""


class DimensionMismatch(JcehbError, ValueError):
    pass


class NonFiniteValue(JcehbError, ValueError):
    pass


class DegenerateDiagonal(JcehbError, ValueError):
    """A diagonal entry is too small to take its reciprocal."""


class SingularGram(JcehbError, ValueError):
    """A Gram matrix is numerically singular (condition number above limit)."""


class PilotPowerViolation(JcehbError, ValueError):
    pass


class ZeroPrecoder(JcehbError, ValueError):
    """``F_RF @ F_BB`` has zero Frobenius norm and cannot be normalized."""


class ZeroReference(JcehbError, ValueError):
    """NMSE requested against an all-zero reference."""


class NonFiniteLoss(JcehbError, FloatingPointError):
    def __init__(self, msg, step=None):
        super().__init__(msg if step is None else f"{msg} (step {step})")
        self.step = step


class ConfigError(JcehbError, ValueError):
    """Invalid scenario configuration; the message names the offending key."""


class SchemaError(JcehbError, ValueError):
    """A CSV input does not follow the documented column schema."""
