"""Exception types shared across the package."""


class GsomsimError(Exception):
    """Base class for all package errors."""


class ValidationError(GsomsimError, ValueError):
    """Invalid problem data, scenario data, or input file."""


class DomainError(ValidationError):
    """Argument outside the physical domain of an operation."""


class InfeasibleSpeedError(DomainError):
    """Requested speed exceeds the free-flow speed for the given property."""


class EmptyLinkError(GsomsimError):
    """Net property requested for a link with zero total density."""


class NoInflowError(GsomsimError):
    """Upstream middle state requested for an output with zero inflow rate."""


class NumericalError(GsomsimError, ArithmeticError):
    """A numerical routine failed to converge or terminate."""


class CFLError(ValidationError):
    """Timestep violates the CFL stability bound."""
