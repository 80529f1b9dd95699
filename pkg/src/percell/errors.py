"""Exception types shared across the workbench."""


class PercellError(Exception):
    """Base class for all workbench errors."""


class GeometryError(PercellError):
    """Invalid cell or domain geometry (hole leaves the cell, bad tiling, ...)."""


class MeshError(PercellError):
    """Mesh construction or consistency failure."""


class DimensionError(PercellError):
    """Array length does not match the mesh it is paired with."""


class TagError(PercellError):
    """Unknown boundary tag."""


class SolverError(PercellError):
    """Linear solver breakdown or iteration cap."""


class DomainError(PercellError):
    """Constitutive function evaluated outside its admissible domain."""


class AdmissibilityError(PercellError):
    """Parameter set violates an exponent or boundedness condition."""


class DivergenceError(PercellError):
    """Velocity field fails the discrete divergence or normal-flux test."""


class ConvergenceError(PercellError):
    """Active-set projection cycling past its iteration cap."""


class PicardDivergence(PercellError):
    """Nonlinear per-step iteration did not reach tolerance."""


class InterpolationError(PercellError):
    """Point lies outside the mesh being interpolated."""


class GridMismatchError(PercellError):
    """Two time-indexed objects live on different grids."""


class CoercivityError(PercellError):
    """Coefficient field is not bounded away from zero."""


class ConfigError(PercellError):
    """Malformed workbench configuration file."""
