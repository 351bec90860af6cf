"""Steady power-law flow with prescribed outlet fluxes in channel domains."""

from .carrier import build_carrier_2d, verify_carrier
from .carrier3d import build_spherical_carrier
from .continuation import growth_functionals, run_truncation_sequence
from .errors import OutletFlowError
from .geometry import cross_section, cut_domain, s_channel, straight_strip, t_junction
from .meshing import mesh_cut_domain
from .solver import SolverConfig, solve_truncated

__version__ = "0.1.0"

__all__ = [
    "OutletFlowError",
    "SolverConfig",
    "build_carrier_2d",
    "build_spherical_carrier",
    "cross_section",
    "cut_domain",
    "growth_functionals",
    "mesh_cut_domain",
    "run_truncation_sequence",
    "s_channel",
    "solve_truncated",
    "straight_strip",
    "t_junction",
    "verify_carrier",
]
