"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A caller broke a documented precondition (shape, range, budget...)."""


class NumericError(FloatingPointError):
    """A computation produced non-finite values."""
