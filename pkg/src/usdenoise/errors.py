"""Exception hierarchy shared by all modules.

Each class maps onto one CLI exit code (see ``usdenoise.cli``).
"""


class USDenoiseError(Exception):
    """Base class for package errors."""


class ContractError(USDenoiseError, ValueError):
    """A caller violated an operation precondition."""


class ConfigError(USDenoiseError, ValueError):
    """Invalid model/train/run configuration."""


class FormatError(USDenoiseError, ValueError):
    """Unreadable or malformed file contents."""


class ConfigMismatchError(FormatError):
    """Checkpoint was produced under a different configuration."""


class DatasetError(USDenoiseError):
    """Missing or inconsistent dataset files."""


class NumericError(USDenoiseError, ArithmeticError):
    """NaN or other non-finite value encountered."""
