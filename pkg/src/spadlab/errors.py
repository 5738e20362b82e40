"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: InputError -> 2, NumericError -> 3,
OSError -> 4.
"""


class SpadlabError(Exception):
    pass


class InputError(SpadlabError, ValueError):
    """Malformed or out-of-contract input data or parameters."""


class NumericError(SpadlabError, RuntimeError):
    """A numerical procedure failed (non-convergence, degenerate geometry)."""
