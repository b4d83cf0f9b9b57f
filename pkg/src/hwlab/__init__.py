"""hwlab: Hasegawa-Wakatani turbulence simulation, surrogate learning,
and gradient-based parameter estimation on periodic 2-D grids."""

__version__ = "0.1.0"

from .numerics import Field, Grid, make_grid
from .hwsim import HwParams, PlasmaState, SimConfig, Trajectory, simulate

__all__ = [
    "__version__",
    "Field",
    "Grid",
    "make_grid",
    "HwParams",
    "PlasmaState",
    "SimConfig",
    "Trajectory",
    "simulate",
]
