"""Exception types shared across the package.

The CLI maps these onto exit codes: ContractError -> 2, NumericError -> 3.
"""


class ContractError(ValueError):
    """An input violated a documented precondition or invariant."""


class NumericError(RuntimeError):
    """A computation produced NaN/Inf or otherwise diverged."""
