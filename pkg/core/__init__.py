"""
Core module for parabolic p-capacity computations
"""

from .errors import (CapacityError, ConfigurationError, ContractError, DependencyError,
                     DomainError, GeometryError, ResolutionError, SolverError)
from .stgrid import (Domain, SpaceTimeGrid, ScalarField, FluxField, SetMask, ShapeSpec,
                     build_grid, rasterize, refine)
from .elliptic import elliptic_capacity, dual_norm_dt, fatness_ratio, solve_p_poisson
from .parabolic import balayage, evolve, measure_capacity, riesz_measure, energy_norm
from .varcap import CapacityOptions, variational_capacity, capacity_of_union, w_norm
from .parhaus import dp_dist, dp_diam, hausdorff_content
from .report import CapacityReport, WNormBreakdown
from .rng import DeterministicRNG

__all__ = [
    'CapacityError', 'ConfigurationError', 'ContractError', 'DependencyError',
    'DomainError', 'GeometryError', 'ResolutionError', 'SolverError',
    'Domain', 'SpaceTimeGrid', 'ScalarField', 'FluxField', 'SetMask', 'ShapeSpec',
    'build_grid', 'rasterize', 'refine',
    'elliptic_capacity', 'dual_norm_dt', 'fatness_ratio', 'solve_p_poisson',
    'balayage', 'evolve', 'measure_capacity', 'riesz_measure', 'energy_norm',
    'CapacityOptions', 'variational_capacity', 'capacity_of_union', 'w_norm',
    'dp_dist', 'dp_diam', 'hausdorff_content',
    'CapacityReport', 'WNormBreakdown',
    'DeterministicRNG',
]
