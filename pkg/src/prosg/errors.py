"""Shared exception types.

The CLI maps these onto exit codes: usage errors -> 1, data errors -> 2,
numeric failures -> 3.
"""


class ProsgError(Exception):
    """Base class for all package errors."""


class ShapeError(ProsgError):
    """Tensor shapes do not compose; message names both shapes."""


class ContractError(ProsgError):
    """An operation precondition was violated by the caller."""


class NumericError(ProsgError):
    """Non-finite values or numerically invalid state."""


class InputError(ProsgError):
    """Invalid user-supplied data (datasets, scripts, configs)."""


class GraphLookupError(ProsgError):
    """A node, frame, or decoder key does not resolve in the scene graph."""


class CoverageError(ProsgError):
    """A requested frame or pose is not covered by any local graph."""
