"""Susceptibility mapping for spatial SIS outbreak panels.

Simulate outbreak panels under a distance-kernel SIS model, estimate the
background rate and kernel range, choose between independent and spatially
dependent susceptibility models, and fit them by MCMC.
"""

__version__ = "0.1.0"

from .epimodel import OutbreakPanel, force_of_infection, log_likelihood, outbreak_probability
from .errors import SismapError
from .spatial import KernelParams, SpatialUnits, kernel_eval, pairwise_distances

__all__ = [
    "__version__",
    "KernelParams",
    "OutbreakPanel",
    "SismapError",
    "SpatialUnits",
    "force_of_infection",
    "kernel_eval",
    "log_likelihood",
    "outbreak_probability",
    "pairwise_distances",
]
