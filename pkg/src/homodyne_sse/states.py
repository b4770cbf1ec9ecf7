"""Initial-state preparation and reference moment curves.

The two-mode squeezed state used by the EPR runs is built directly in the
number basis: amplitude ``tanh(r)^n / cosh(r)`` on ``|n, n>``.  Truncation
removes a geometric tail, so the vector is renormalized after construction;
the discarded weight is available from :func:`tmss_truncation_deficit` for
diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fock import FockSpace, StateVector


@dataclass(frozen=True)
class SqueezeParams:
    """Squeezing strength and occupation cutoff for state preparation."""

    r: float
    cutoff: int

    def __post_init__(self) -> None:
        if not np.isfinite(self.r):
            raise ValueError("squeezing parameter must be finite")
        if int(self.cutoff) < 1:
            raise ValueError("cutoff must be at least 1")
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "cutoff", int(self.cutoff))


@dataclass(frozen=True)
class MomentRecord:
    """Equal-time second moments of the decaying two-mode squeezed state.

    ``xx`` and ``pp`` are the cross-mode quadrature correlations; the
    ``_self`` entries are the same-mode second moments.  Note the
    ``_self`` curves are pure exponential decays toward zero rather than
    toward the vacuum value; the master-equation integrator is the
    arbiter where they disagree (see tests).
    """

    xx: float
    pp: float
    xx_self: float
    pp_self: float


def tmss(params: SqueezeParams, space: FockSpace) -> StateVector:
    """Two-mode squeezed state on the diagonal ``|n, n>``, renormalized.

    The space must have exactly two modes; both cutoffs must be at least
    ``params.cutoff`` so the intended ladder fits.
    """
    if space.num_modes != 2:
        raise ValueError("two-mode squeezed state needs a two-mode space")
    if any(c < params.cutoff for c in space.cutoffs):
        raise ValueError("space cutoffs are smaller than the requested ladder")
    n = np.arange(params.cutoff + 1)
    coeff = np.tanh(params.r) ** n / np.cosh(params.r)
    amps = np.zeros(space.dimension, dtype=np.complex128)
    for k, c in zip(n, coeff):
        amps[space.index_of((k, k))] = c
    state = StateVector(amps, space)
    return state.normalized()


def tmss_truncation_deficit(params: SqueezeParams) -> float:
    """Probability weight of the ``|n, n>`` ladder discarded above the cutoff.

    Closed form of the geometric tail ``sum_{n > cutoff} tanh(r)^{2n} / cosh(r)^2``.
    """
    t2 = np.tanh(params.r) ** 2
    if t2 == 0.0:
        return 0.0
    return float(t2 ** (params.cutoff + 1) / ((1.0 - t2) * np.cosh(params.r) ** 2))


def analytic_moments(r: float, tau: float) -> MomentRecord:
    """Reference moment curves for squeezing ``r`` after decay time ``tau``."""
    decay = np.exp(-float(tau))
    return MomentRecord(
        xx=float(decay * np.sinh(2.0 * r)),
        pp=float(-decay * np.sinh(2.0 * r)),
        xx_self=float(decay * np.cosh(2.0 * r)),
        pp_self=float(decay * np.cosh(2.0 * r)),
    )
