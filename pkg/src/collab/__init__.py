"""Collision-coupled map lattice laboratory.

Simulates interval-map lattices on a finite torus where neighbouring sites
exchange their states when both fall into small collision zones, and measures
the rare-event statistics of collisions at a distinguished site: survival
curves and escape rates, hitting-time laws, collision counting processes,
Ulam discretizations of the closed / open / twisted transfer operators, and
the closed-form extremal-index machinery that the two routes cross-check.
"""

__version__ = "0.1.0"

from .interval_map import DensityEstimate, PiecewiseExpandingMap, invariant_density
from .lattice import CollisionScheme, LatticeState, SwapEvent

__all__ = [
    "CollisionScheme",
    "DensityEstimate",
    "LatticeState",
    "PiecewiseExpandingMap",
    "SwapEvent",
    "invariant_density",
    "__version__",
]
