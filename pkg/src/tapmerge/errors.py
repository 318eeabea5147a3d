"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: data/format problems exit with 2 and
numerical failures with 3.
"""


class TapMergeError(Exception):
    """Base class for all errors raised by tapmerge."""

    exit_code = 2


class FormatError(TapMergeError, ValueError):
    """A file or serialized object does not conform to its format."""


class SchemaMismatchError(TapMergeError, ValueError):
    """Two weight maps disagree on parameter names or shapes."""


class SpecError(TapMergeError, ValueError):
    """A merge spec, sweep config or other user-provided structure is invalid."""


class NonFiniteError(FormatError):
    """A tensor contains NaN or Inf."""


class NumericalError(TapMergeError, ArithmeticError):
    """A numerical routine failed (divergence, SVD failure, undefined cosine)."""

    exit_code = 3


class ProviderError(TapMergeError, RuntimeError):
    """An external feature provider failed."""
