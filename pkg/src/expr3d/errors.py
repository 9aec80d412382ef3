"""Exception types shared across the package."""


class Expr3dError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(Expr3dError):
    """An argument violates a documented shape or dimension contract."""


class ValidationError(Expr3dError):
    """Input values are structurally fine but semantically invalid."""


class GeometryError(Expr3dError):
    """Projection geometry is degenerate (e.g. a point at or behind the camera).

    Carries the index of the first offending point when known.
    """

    def __init__(self, message: str, point_index: int | None = None):
        super().__init__(message)
        self.point_index = point_index


class SolverError(Expr3dError):
    """A linear solve inside an optimizer failed."""


class FormatError(Expr3dError):
    """A file could not be parsed as the expected container format."""


class FormatVersionError(FormatError):
    """The container parsed but its format version is unsupported."""
