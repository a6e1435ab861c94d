"""Exception types raised by vblab.

Each domain error also derives from the builtin the CLI catches, so callers
that only know ``ValueError`` or ``RuntimeError`` keep working.
"""

from typing import Any, Optional


class VblabError(Exception):
    """Base class for all vblab errors."""


class ContractError(VblabError, ValueError):
    """An input violates a shape, simplex or dimension contract."""


class ParameterError(VblabError, ValueError):
    """A hyperparameter or rate is outside its admissible range."""


class UnsupportedFamilyError(ParameterError):
    """The operation is not defined for this loss family."""


class UnboundedLossError(ParameterError):
    """The loss has an infinite variation ratio."""


class NotCleanDominantError(ParameterError):
    """The noise model lets a wrong label outweigh the clean one."""


class InvalidWeightsError(ParameterError):
    """Risk weights lack a strict unique maximum."""


class StratificationError(ParameterError):
    """A class is too small to be split."""


class DegenerateClassError(ContractError):
    """A class needed for a per-class statistic has no samples."""


class ResourceLimitError(VblabError, ValueError):
    """A brute-force search would exceed its size limit."""


class ConfigError(VblabError, ValueError):
    """An experiment file or user config is malformed."""


class IdxFormatError(VblabError, ValueError):
    """An IDX file has the wrong magic number or dimensionality."""


class ConsistencyError(VblabError, ValueError):
    """Two inputs that must agree (image and label counts) do not."""


class TruncatedFileError(VblabError, OSError):
    """A binary file ended before its declared payload."""


class DivergenceError(VblabError, RuntimeError):
    """Training produced a non-finite loss or gradient.

    Attributes:
        diagnostic: Human-readable description of where it happened.
        partial: The metrics collected before the abort, if any.
    """

    def __init__(self, diagnostic: str, partial: Optional[Any] = None):
        super().__init__(diagnostic)
        self.diagnostic = diagnostic
        self.partial = partial
