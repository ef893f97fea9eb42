"""Guided-policy-search warm starts for 6-DoF powered-descent trajectory optimization."""

from .errors import PtrGpsError
from .gps import GpsConfig, GpsResult, gps_run
from .policy import Mlp, Normalizer, forward, policy_rollout
from .ptr import PtrConfig, PtrResult, ptr_solve
from .transcription import make_grid, straight_line_init
from .vehicle import BoundaryConditions, VehicleParams, landing_target

__version__ = "0.1.0"

__all__ = [
    "BoundaryConditions",
    "GpsConfig",
    "GpsResult",
    "Mlp",
    "Normalizer",
    "PtrConfig",
    "PtrGpsError",
    "PtrResult",
    "VehicleParams",
    "forward",
    "gps_run",
    "landing_target",
    "make_grid",
    "policy_rollout",
    "ptr_solve",
    "straight_line_init",
]
