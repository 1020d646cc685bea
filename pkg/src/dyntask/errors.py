"""Exception hierarchy shared across the library.

Every deliberate failure raises one of these; bare ValueError/RuntimeError
escaping the library is a bug.
"""


class DynTaskError(Exception):
    """Base class for all library errors."""


class ShapeError(DynTaskError):
    """Operand shapes are incompatible (reported with both shapes)."""


class ConfigError(DynTaskError):
    """Invalid configuration value (bad stride, probability, unknown key...)."""


class DomainError(DynTaskError):
    """Input outside an operation's mathematical domain (log/sqrt of <= 0)."""


class ContractError(DynTaskError):
    """API precondition violated (non-scalar loss, batch of 1 in train mode)."""


class DataError(DynTaskError):
    """Malformed dataset content: bad label, dangling locator, bad row."""


class ProtocolError(DynTaskError):
    """Evaluation/training protocol precondition violated (uninitialized
    center, degenerate fold, empty authentication quadrant)."""


class FormatError(DynTaskError):
    """Malformed binary file: bad magic, version mismatch, truncation."""


class CompatibilityError(DynTaskError):
    """Checkpoint/config mismatch during transfer or load."""


class NumericsError(DynTaskError):
    """A NaN/Inf was produced, or training hit a non-finite gradient."""
