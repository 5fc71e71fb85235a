"""Perturbed lattices: realization, path moments, greedy paths, couplings and discriminating statistics."""
from __future__ import annotations

__version__ = "0.1.0"

from .errors import ConfigurationError, ReplicateError, ResourceError, UnsupportedDimensionError
from .lattice import DoubledSpec, PointConfiguration, ProcessSpec, Window, delete_sites, realize, realize_doubled
from .laws import PerturbationLaw, chi_square_factor, density, density_ratio, sample, sample_sites
from .rng import SiteRandomness
