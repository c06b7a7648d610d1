"""Temporal-multiscale simulator for flow-driven plaque growth in a 2-D channel."""

from .errors import (
    ConfigError,
    ConnectivityMismatch,
    DimensionMismatch,
    DomainCollapse,
    InvariantViolation,
    NegativeConcentration,
    NonlinearDivergence,
    ParseError,
    PeriodicityNotReached,
    PinchWarning,
    PlaquesimError,
    SingularMatrix,
    UnknownKey,
)
from .meshing import (
    GaussianBump,
    Mesh,
    build_reference_mesh,
    deform_mesh,
    wall_edges,
)

__all__ = [
    "ConfigError",
    "ConnectivityMismatch",
    "DimensionMismatch",
    "DomainCollapse",
    "GaussianBump",
    "InvariantViolation",
    "Mesh",
    "NegativeConcentration",
    "NonlinearDivergence",
    "ParseError",
    "PeriodicityNotReached",
    "PinchWarning",
    "PlaquesimError",
    "SingularMatrix",
    "UnknownKey",
    "build_reference_mesh",
    "deform_mesh",
    "wall_edges",
]
