"""Error hierarchy shared by every planground module.

Each error derives from :class:`PlanError` and from the builtin it
specialises, so callers may catch either ``PlanError`` or e.g.
``ValueError``.
"""

from __future__ import annotations


class PlanError(Exception):
    """Root of all planground errors."""


class InvalidShapeError(PlanError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class InvalidValueError(PlanError, ValueError):
    """An input contains NaN/inf or lies outside its allowed range."""


class InvalidBoxError(PlanError, ValueError):
    """A bounding box is degenerate or lies outside the image."""


class VocabularyError(PlanError, ValueError):
    """A token or token id is not part of the vocabulary."""


class ExpressionParseError(PlanError, ValueError):
    """An expression does not follow the shape-world grammar."""


class CapacityError(PlanError, ValueError):
    """More objects were requested than the grid can hold."""


class NoDistinguishingExpressionError(PlanError):
    """No uniquely resolving expression was found for a scene."""


class DimensionMismatchError(PlanError, ValueError):
    """Data dimensions do not match the model's dimensions."""


class NonFiniteError(PlanError, FloatingPointError):
    """A loss or gradient became NaN or infinite."""


class ConfigError(PlanError, ValueError):
    """A configuration value or file is invalid."""


class CheckpointError(PlanError, OSError):
    """A checkpoint cannot be written or read."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint was written by an incompatible format version."""


class CheckpointShapeError(CheckpointError):
    """The checkpoint's shape manifest disagrees with the expected model."""


class CheckpointChecksumError(CheckpointError):
    """The checkpoint is truncated or corrupted."""


class TraceError(PlanError, ValueError):
    """An attention trace failed its write-time checks."""


__all__ = [
    "PlanError",
    "InvalidShapeError",
    "InvalidValueError",
    "InvalidBoxError",
    "VocabularyError",
    "ExpressionParseError",
    "CapacityError",
    "NoDistinguishingExpressionError",
    "DimensionMismatchError",
    "NonFiniteError",
    "ConfigError",
    "CheckpointError",
    "CheckpointVersionError",
    "CheckpointShapeError",
    "CheckpointChecksumError",
    "TraceError",
]
