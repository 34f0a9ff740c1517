"""Flow-driven posterior sampling with analytic Gaussian-mixture priors."""

from . import gmm, operators, schedule, solvers, tweedie, velocity
from ._core import BACKEND

__version__ = "0.1.0"

__all__ = ["gmm", "operators", "schedule", "solvers", "tweedie", "velocity", "BACKEND"]
