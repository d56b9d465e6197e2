"""Exception hierarchy shared by every module in the package.

Four failure families, kept deliberately coarse so callers (and the CLI
exit-code mapping) can dispatch on type alone:

* ``UsageError``    -- caller broke an API contract (bad argument, wrong call order)
* ``ConfigError``   -- inconsistent or unsatisfiable configuration values
* ``DataError``     -- malformed external data (files, checkpoints, datasets)
* ``NumericError``  -- non-finite values or numerically impossible requests
"""

from __future__ import annotations


class CtxDiffError(Exception):
    """Base class for all package-specific errors."""


class UsageError(CtxDiffError):
    """An API was called with invalid arguments or in an invalid state."""


class ConfigError(CtxDiffError):
    """A configuration object is internally inconsistent or unsupported."""


class ShapeError(UsageError):
    """Operands have incompatible shapes; message names both shapes."""


class DataError(CtxDiffError):
    """External data (dataset files, checkpoints, images) is malformed."""


class TokenizationError(DataError):
    """A prompt contains a word outside the closed vocabulary."""


class NumericError(CtxDiffError):
    """A computation produced non-finite values or is numerically invalid."""
