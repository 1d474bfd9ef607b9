"""Exception types raised across the package."""


class PhotophysError(Exception):
    """Base class for all package errors."""


class MetaMismatch(PhotophysError, ValueError):
    pass


class NotSorted(PhotophysError, ValueError):
    pass


class FormatError(PhotophysError, ValueError):
    """Malformed time-tag file or CSV."""


class DegenerateNormalization(PhotophysError, ValueError):
    pass


class Underdetermined(PhotophysError, ValueError):
    pass


class EmptyData(PhotophysError, ValueError):
    pass


class NoPeak(PhotophysError, ValueError):
    pass


class OutOfBounds(PhotophysError, ValueError):
    pass


class EmptySelection(PhotophysError, ValueError):
    pass


class DegenerateMean(PhotophysError, ValueError):
    pass


class DomainError(PhotophysError, ValueError):
    pass


class TruncationError(PhotophysError, ValueError):
    def __init__(self, message, achieved_mass):
        super().__init__(message)
        self.achieved_mass = achieved_mass


class GridError(PhotophysError, ValueError):
    pass
