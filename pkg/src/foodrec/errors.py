"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: validation-type errors exit 1, I/O
errors (plain OSError) exit 2, numeric failures exit 3.
"""


class FoodrecError(Exception):
    pass


class DimensionError(FoodrecError, ValueError):
    """Array shapes are inconsistent with an operation's contract."""


class ContractError(FoodrecError, ValueError):
    """A precondition on argument values was violated."""


class ValidationError(FoodrecError, ValueError):
    """Input data (manifests, logs, configs) failed validation."""


class NumericError(FoodrecError, ArithmeticError):
    """A computation produced non-finite values."""
