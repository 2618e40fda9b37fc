"""Exception taxonomy shared by every fldkit module.

The CLI maps these onto distinct process exit codes, so library code
should raise the most specific class that applies.
"""


class FldkitError(Exception):
    """Base class for all fldkit errors."""


class DimensionError(FldkitError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(FldkitError, ValueError):
    """A documented precondition or invariant was violated."""


class ConfigurationError(FldkitError, ValueError):
    """A configuration value is inconsistent or unusable."""


class ParseError(FldkitError, ValueError):
    """An input file does not follow its documented grammar."""
