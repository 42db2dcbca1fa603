from __future__ import annotations


class VolterraError(RuntimeError):
    """Base class for every failure raised by volterra-fk."""


class ConfigError(VolterraError, ValueError):
    """Invalid parameter, precondition or configuration key."""


class ContractError(VolterraError):
    """A caller broke a data-structure contract (region, index, shape)."""


class NumericalError(VolterraError):
    """A computation produced non-finite values or could not be carried out."""


class RegressionError(NumericalError):
    def __init__(self, message: str, *, cell: tuple[int | None, int] | None = None):
        if cell is not None:
            i, k = cell
            message = f"{message} (time k={k})" if i is None else f"{message} (parameter i={i}, time k={k})"
        super().__init__(message)
        self.cell = cell


class BudgetError(NumericalError):
    """Nested Monte Carlo work would exceed the configured cap."""
