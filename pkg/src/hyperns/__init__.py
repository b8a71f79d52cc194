"""Galerkin-truncated stochastic hyperdissipative Navier-Stokes and Burgers
models with Monte Carlo checks of derivative formulas and functional
inequalities."""

from .estimators import TestFunctional, estimate_gradient, fd_gradient_crn, girsanov_checks
from .integrator import Integrator, IntegratorConfig, NoiseStream
from .model import Model
from .spectral import LatticeSpec, ModelParams, SpectralSpace, compute_constants

__version__ = "0.1.0"

__all__ = [
    "LatticeSpec",
    "ModelParams",
    "SpectralSpace",
    "compute_constants",
    "Model",
    "Integrator",
    "IntegratorConfig",
    "NoiseStream",
    "TestFunctional",
    "estimate_gradient",
    "fd_gradient_crn",
    "girsanov_checks",
]
