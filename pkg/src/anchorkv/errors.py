"""Exception hierarchy shared by every module.

The CLI maps :class:`InputError` subclasses to exit code 1 and
:class:`NumericError` subclasses to exit code 2.
"""

from __future__ import annotations


class AnchorKVError(Exception):
    """Base class for all package errors."""


class InputError(AnchorKVError, ValueError):
    """Invalid user-supplied input (bad indices, degenerate vectors, ...)."""


class ShapeError(InputError):
    """Operand shapes are incompatible."""


class ConfigError(InputError):
    """A model or policy configuration violates its invariants."""


class ContaminationError(InputError):
    """A sequence already contains the anchor token before planting."""


class LengthError(InputError):
    """A sequence exceeds the model's maximum length."""


class ProtocolError(AnchorKVError, RuntimeError):
    """A stateful object was driven in the wrong order."""


class NumericError(AnchorKVError, ArithmeticError):
    """A non-finite value appeared or an iteration failed to converge."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class ConvergenceError(NumericError):
    """An iterative solver exceeded its iteration budget."""
