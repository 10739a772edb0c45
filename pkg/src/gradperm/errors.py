"""Exception hierarchy shared by every gradperm module."""


class GradpermError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(GradpermError, ValueError):
    pass


class InvalidInputError(GradpermError, ValueError):
    pass


class ShapeError(GradpermError, ValueError):
    pass


class RankError(GradpermError, ValueError):
    """A design or normal-equation system is (numerically) singular."""


class UnsupportedArchitectureError(GradpermError, ValueError):
    pass


class UnsupportedOutcomeError(GradpermError, ValueError):
    pass


class DivergenceError(GradpermError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")
