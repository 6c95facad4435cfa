"""Exception types shared across modules."""


class EmShiftError(Exception):
    """Base class for all package errors."""


class DomainError(EmShiftError, ValueError):
    """An argument lies outside the domain an operation is defined on."""


class CapacityError(EmShiftError):
    """A randomized construction could not be completed within its budget.

    ``achieved`` reports how far the construction got (e.g. windows placed).
    """

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class PreconditionError(EmShiftError, ValueError):
    """Inputs violate a structural assumption of the operation."""


class DegeneracyError(EmShiftError, ArithmeticError):
    """A normalizer vanished, so probabilities cannot be formed."""


class TrainingError(EmShiftError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, batch=None, iteration=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.iteration = iteration


class GradientCheckError(EmShiftError, ArithmeticError):
    """A gradient component was not finite."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index
