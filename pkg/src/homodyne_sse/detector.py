"""Measured-current models, the finite-bandwidth filter, phase schedules,
and time-binned current averages.

Three candidate records for what a homodyne detector actually reports are
implemented.  Writing xi for the white noise driving the trajectory and
<x~> for the conditional quadrature mean:

* ``STRAT``       -- midpoint-state mean plus the step noise;
* ``ITO_SAME``    -- start-of-step mean plus the same step's noise;
* ``ITO_DELAYED`` -- start-of-step mean plus the previous step's noise.

A physical detector of bandwidth kappa reports the low-passed record
J obeying dJ/dtau = -kappa (J - j), integrated here with the exact
exponential update so that arbitrarily stiff kappa*dtau is stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .fock import PhaseVector


class CurrentModel(Enum):
    STRAT = "strat"
    ITO_SAME = "ito"
    ITO_DELAYED = "ito_delayed"


#: models whose record is sampled at the step midpoint (semi-implicit scheme)
MIDPOINT_MODELS = frozenset({CurrentModel.STRAT})


def sample_current(
    model: CurrentModel,
    expect_x: np.ndarray,
    noise_now: np.ndarray | None = None,
    noise_prev: np.ndarray | None = None,
) -> np.ndarray:
    """Compose a pseudo-current sample from conditional means and noise.

    ``expect_x`` is <x~> per monitored channel (midpoint state for ``STRAT``,
    start-of-step state for the Ito models); ``noise_now``/``noise_prev`` are
    xi = dW/dtau rows.  Arrays broadcast, so batched trajectories work.
    """
    expect_x = np.asarray(expect_x)
    if model is CurrentModel.ITO_DELAYED:
        if noise_prev is None:
            raise ValueError("ITO_DELAYED needs the previous step's noise")
        return expect_x + np.asarray(noise_prev)
    if noise_now is None:
        raise ValueError(f"{model.value} needs this step's noise")
    return expect_x + np.asarray(noise_now)


# ---------------------------------------------------------------------------
# finite-bandwidth filter
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterState:
    """Low-passed current J and its bandwidth kappa (units of the loss rate)."""

    values: np.ndarray
    kappa: float

    def __post_init__(self) -> None:
        if not self.kappa > 0.0:
            raise ValueError("filter bandwidth must be positive")
        vals = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ValueError("filter state must be finite")
        object.__setattr__(self, "values", vals)


def filter_step(state: FilterState, current: np.ndarray, dt: float) -> FilterState:
    """Exact exponential update treating the record as constant over the step."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    decay = np.exp(-state.kappa * dt)
    new = decay * state.values + (1.0 - decay) * np.asarray(current, dtype=float)
    return FilterState(new, state.kappa)


def filter_series(
    currents: np.ndarray, kappa: float, dt: float, initial: np.ndarray | float = 0.0
) -> np.ndarray:
    """Filter a whole record: out[t] results from feeding currents[..., t, :].

    ``currents`` has time on axis -2 (shape (..., T, M)); the output has the
    same shape.  ``initial`` seeds J before the first sample.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if not kappa > 0.0:
        raise ValueError("filter bandwidth must be positive")
    currents = np.asarray(currents, dtype=float)
    decay = np.exp(-kappa * dt)
    out = np.empty_like(currents)
    level = np.broadcast_to(np.asarray(initial, dtype=float), currents.shape[:-2] + currents.shape[-1:]).copy()
    for t in range(currents.shape[-2]):
        level = decay * level + (1.0 - decay) * currents[..., t, :]
        out[..., t, :] = level
    return out


# ---------------------------------------------------------------------------
# local-oscillator phase schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhaseSchedule:
    """Piecewise-constant phases: value k applies on [switch_{k-1}, switch_k).

    The final value extends to ``horizon`` (or indefinitely when horizon is
    None).  Lookups are right-continuous, so the new phases apply from the
    switch instant itself.
    """

    values: tuple[PhaseVector, ...]
    switch_times: tuple[float, ...] = ()
    horizon: float | None = None

    def __post_init__(self) -> None:
        if len(self.values) != len(self.switch_times) + 1:
            raise ValueError("need exactly one more phase value than switch time")
        times = self.switch_times
        if any(t <= 0.0 for t in times):
            raise ValueError("switch times must be positive")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("switch times must be strictly increasing")
        if self.horizon is not None and times and times[-1] >= self.horizon:
            raise ValueError("switch times must precede the horizon")
        num_modes = {len(v) for v in self.values}
        if len(num_modes) != 1:
            raise ValueError("all phase vectors must cover the same modes")

    @classmethod
    def constant(cls, phases: PhaseVector, horizon: float | None = None) -> "PhaseSchedule":
        return cls(values=(phases,), horizon=horizon)

    @classmethod
    def single_switch(
        cls,
        before: PhaseVector,
        after: PhaseVector,
        at: float,
        horizon: float | None = None,
    ) -> "PhaseSchedule":
        return cls(values=(before, after), switch_times=(at,), horizon=horizon)

    @property
    def num_modes(self) -> int:
        return len(self.values[0])

    def phase_at(self, tau: float) -> PhaseVector:
        if tau < 0.0:
            raise ValueError(f"tau={tau} is before the schedule start")
        if self.horizon is not None and tau > self.horizon * (1.0 + 1e-12):
            raise ValueError(f"tau={tau} is beyond the schedule horizon {self.horizon}")
        index = int(np.searchsorted(np.asarray(self.switch_times), tau, side="right"))
        return self.values[index]


def phase_at(schedule: PhaseSchedule, tau: float) -> PhaseVector:
    return schedule.phase_at(tau)


# ---------------------------------------------------------------------------
# per-trajectory record and time-binned averages
# ---------------------------------------------------------------------------


@dataclass
class CurrentRecord:
    """One trajectory's record time series.

    ``taus`` are the sample times of the pseudo-current: step midpoints for
    the ``STRAT`` model, step starts for the Ito models.  ``expectations``
    hold the conditional <x~> part of each sample, so ``currents -
    expectations`` recovers the injected noise.  ``filtered`` (if present)
    is sampled on the same grid, seeded from J = 0.
    """

    dt: float
    taus: np.ndarray
    currents: np.ndarray
    expectations: np.ndarray
    model: CurrentModel
    filtered: np.ndarray | None = None
    kappa: float | None = None
    raw_norms: np.ndarray | None = None
    dropped_probability: float = 0.0
    nonconverged_steps: int = 0

    @property
    def midpoint_sampled(self) -> bool:
        return self.model in MIDPOINT_MODELS

    @property
    def num_samples(self) -> int:
        return len(self.taus)


@dataclass(frozen=True)
class TimeBin:
    """One centered time bin: the integral of the record over
    [max(0, (n - 1/2) width), (n + 1/2) width] (clipped to the horizon)."""

    index: int
    width: float
    lo: float
    hi: float
    integral: np.ndarray

    @property
    def center(self) -> float:
        return self.index * self.width


def _bin_edges(bin_width: float, horizon: float) -> list[tuple[int, float, float]]:
    edges = []
    n = 0
    while True:
        lo = max(0.0, (n - 0.5) * bin_width)
        hi = (n + 0.5) * bin_width
        if lo >= horizon - 1e-12:
            break
        edges.append((n, lo, min(hi, horizon)))
        n += 1
    return edges


def time_average(
    record: CurrentRecord, bin_width: float, *, which: str = "auto"
) -> list[TimeBin]:
    """Integrate the record over centered bins of the given width.

    Grid-sampled records are integrated with the trapezoid rule on their
    sample grid; midpoint-sampled records with the (exactly tiling) midpoint
    rule.  The bin width must be commensurate with the step size.
    """
    if which == "auto":
        which = "filtered" if record.filtered is not None else "current"
    if which == "filtered":
        if record.filtered is None:
            raise ValueError("record has no filtered series")
        series = record.filtered
    elif which == "current":
        series = record.currents
    else:
        raise ValueError(f"unknown series selector {which!r}")
    return binned_integrals(
        record.taus,
        series,
        record.dt,
        bin_width,
        midpoint_samples=record.midpoint_sampled,
    )


def binned_integrals(
    taus: np.ndarray,
    series: np.ndarray,
    dt: float,
    bin_width: float,
    *,
    midpoint_samples: bool = False,
) -> list[TimeBin]:
    """Core of :func:`time_average` for bare arrays (time on axis 0)."""
    taus = np.asarray(taus, dtype=float)
    series = np.asarray(series)
    if series.shape[0] != len(taus):
        raise ValueError("series and taus disagree on the number of samples")
    ratio = bin_width / dt
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) % 2:
        # centered bins have edges at half-integer multiples of the width,
        # so only even multiples of the step keep edges on the step grid
        raise ValueError(
            f"bin width {bin_width} is not an even multiple of the step {dt}"
        )
    if midpoint_samples:
        horizon = float(taus[-1] + 0.5 * dt)
    else:
        horizon = float(taus[-1])
    bins: list[TimeBin] = []
    for index, lo, hi in _bin_edges(bin_width, horizon):
        if midpoint_samples:
            # sample k sits at (k + 1/2) dt and tiles [k dt, (k + 1) dt)
            start = taus[0] / dt - 0.5
            if abs(start - round(start)) > 1e-9:
                raise ValueError("midpoint-sampled record is off its half-step grid")
            offset = int(round(start))
            i0 = int(round(lo / dt)) - offset
            i1 = int(round(hi / dt)) - offset
            if i0 < 0 or i1 > series.shape[0]:
                raise ValueError("bin extends beyond the recorded samples")
            integral = series[i0:i1].sum(axis=0) * dt
        else:
            lo_steps = lo / dt
            hi_steps = hi / dt
            if (
                abs(lo_steps - round(lo_steps)) > 1e-9
                or abs(hi_steps - round(hi_steps)) > 1e-9
            ):
                raise ValueError("bin edges do not fall on the sample grid")
            i0, i1 = int(round(lo_steps)), int(round(hi_steps))
            start = taus[0] / dt
            if abs(start - round(start)) > 1e-9:
                raise ValueError("grid-sampled record does not start on the grid")
            offset = int(round(start))
            i0 -= offset
            i1 -= offset
            if i0 < 0 or i1 >= series.shape[0]:
                raise ValueError("bin extends beyond the recorded samples")
            chunk = series[i0 : i1 + 1]
            weights = np.ones(chunk.shape[0])
            weights[0] = weights[-1] = 0.5
            integral = dt * np.tensordot(weights, chunk, axes=(0, 0))
        bins.append(TimeBin(index=index, width=bin_width, lo=lo, hi=hi, integral=integral))
    return bins
