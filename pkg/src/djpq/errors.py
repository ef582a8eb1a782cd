"""Exception hierarchy for the workbench.

Every error raised on a contract boundary derives from WorkbenchError so
callers (and the CLI) can separate validation failures from genuine bugs.
"""


class WorkbenchError(Exception):
    """Base class for all workbench errors."""


class DimensionError(WorkbenchError):
    """Operand shapes do not conform."""


class ContractError(WorkbenchError):
    """An operation was called outside its preconditions."""


class ConfigError(WorkbenchError):
    """Invalid or incomplete configuration."""


class DataError(WorkbenchError):
    """Bad runtime data (labels out of range, non-finite values)."""


class FormatError(WorkbenchError):
    """A byte stream does not match its declared on-disk format."""


class StructuralError(WorkbenchError):
    """Graph surgery would produce an invalid network."""


class DegenerateQuantizerError(WorkbenchError):
    """Quantizer range narrower than one step."""


class DivergenceError(WorkbenchError):
    """Training produced NaN or exploding loss."""
