"""Error taxonomy shared across the package.

Errors are split by what went wrong, not where: shape mismatches, numeric
blow-ups, violated call contracts, bad configs and malformed external files
each get their own class so callers and tests can match precisely.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes; message names the op and the shapes."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf, or is otherwise numerically invalid."""


class ContractError(RuntimeError):
    """An API was called in a way its contract forbids."""


class ConfigError(ValueError):
    """A config file or config object is invalid (unknown key, bad value, ...)."""


class FormatError(ValueError):
    """An external file (wav, manifest, checkpoint, subword model) is malformed."""


class InfeasibleError(ValueError):
    """A CTC label sequence cannot be aligned to the available frames."""


class LengthError(ValueError):
    """An input sequence is too short for the requested operation."""


class UnsupportedTaskError(ValueError):
    """A decode task was requested from a model variant that cannot produce it."""
