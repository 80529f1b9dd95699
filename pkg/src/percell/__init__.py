"""percell: finite elements for obstacle problems in perforated media."""

from .meshing import (CellGeometry, CellMesh, PerforatedMesh, build_cell_mesh,
                      build_perforated_mesh, validate_mesh, save_mesh,
                      load_mesh, save_vtk)
from .model import ModelParams, BoundarySource, VelocityField, exponent_p

__all__ = [
    "CellGeometry", "CellMesh", "PerforatedMesh", "build_cell_mesh",
    "build_perforated_mesh", "validate_mesh", "save_mesh", "load_mesh",
    "save_vtk", "ModelParams", "BoundarySource", "VelocityField",
    "exponent_p",
]

__version__ = "0.1.0"
