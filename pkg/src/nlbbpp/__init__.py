"""Non-local Benamou-Brenier transport between point-process laws on lattice windows."""

from .configspace import (ConfigSpace, DensityMeasure, LatticeWindow, SizingError, build_space,
                          line_window, point_mass, poisson_density, random_density, uniform_density)
from .measures import campbell, entropy, fisher, intensity, laplace
from .mobility import action, lagrangian, log_mean, mobility_alpha
from .dynamics import CEPath, ce_residual, ou_evolve, thinning, thinning_interpolation, thinning_velocity
from .solver import SolverConfig, TransportProblem, TransportSolution, brute_force_w0, solve_w0

__version__ = "0.1.0"

__all__ = [
    "ConfigSpace", "DensityMeasure", "LatticeWindow", "SizingError", "build_space", "line_window",
    "point_mass", "poisson_density", "random_density", "uniform_density",
    "campbell", "entropy", "fisher", "intensity", "laplace",
    "action", "lagrangian", "log_mean", "mobility_alpha",
    "CEPath", "ce_residual", "ou_evolve", "thinning", "thinning_interpolation", "thinning_velocity",
    "SolverConfig", "TransportProblem", "TransportSolution", "brute_force_w0", "solve_w0",
]
