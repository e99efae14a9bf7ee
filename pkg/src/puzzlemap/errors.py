"""Exception types raised across the package."""


class PuzzleMapError(Exception):
    """Base class for all package-specific errors."""


class ParseError(PuzzleMapError):
    """A mesh file could not be parsed under its declared format."""


class NonManifoldError(PuzzleMapError):
    """An edge of the mesh is shared by more than two triangles."""


class DimensionMismatch(PuzzleMapError):
    """Array arguments do not agree in shape."""


class EmptySourceSet(PuzzleMapError):
    """Geodesic distances requested from an empty source set."""


class EmptySelection(PuzzleMapError):
    """A submesh was requested from an empty vertex set."""


class ConvergenceError(PuzzleMapError):
    """The iterative eigensolver hit its iteration cap."""


class InsufficientSize(PuzzleMapError):
    """Requested basis size k is not smaller than the vertex count."""


class InsufficientBasis(PuzzleMapError):
    """The spectral basis is too small for the requested operation."""


class NonPositiveArea(PuzzleMapError):
    """A surface area that must be positive is zero or negative."""


class IndexOutOfRange(PuzzleMapError):
    """A vertex index lies outside the mesh."""


class DegenerateWeights(PuzzleMapError):
    """A funnel weight matrix is identically zero."""


class InvalidMap(PuzzleMapError):
    """A ground-truth correspondence refers to invalid vertices."""


class LengthMismatch(PuzzleMapError):
    """Two label vectors do not have the same length."""


class NonFiniteEnergy(PuzzleMapError):
    """NaN or Inf appeared during optimization; carries diagnostic state."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class SpecInfeasible(PuzzleMapError):
    """A puzzle spec cannot be realized (overlap/missing budget vs parts)."""
