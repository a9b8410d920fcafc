"""Finite element toolkit for the mean field equation of planar vortices."""

from .geometry import Domain, Mesh, build_mesh
from .green import GreenOracle
from .pde import solve_gelfand, solve_mean_field
from .weight import WeightSpec

__all__ = ["Domain", "Mesh", "build_mesh", "GreenOracle", "WeightSpec", "solve_mean_field", "solve_gelfand"]
__version__ = "0.1.0"
