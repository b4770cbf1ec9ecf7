"""Ensemble quantum-trajectory simulator for homodyne-monitored bosonic modes.

The package integrates conditional wavefunction equations for damped,
continuously monitored modes in both Ito and Stratonovich form, models the
measured photocurrent at finite detector bandwidth, and cross-checks every
ensemble against a density-matrix integrator on the same truncated basis.
"""

__version__ = "0.1.0"

from .fock import FockSpace, PhaseVector, StateVector
from .states import SqueezeParams, tmss

__all__ = [
    "FockSpace",
    "PhaseVector",
    "StateVector",
    "SqueezeParams",
    "tmss",
    "__version__",
]
