"""Conditional wavefunction integrators for continuously monitored modes.

Each dissipation channel is a ladder monomial ``c = coeff * a_k**power``:
homodyne-monitored linear loss (power 1, ``coeff = exp(-i phase)``) and,
for parametric-oscillator networks, unmonitored two-photon loss (power 2,
``coeff = nonlinear / sqrt(2)``).  The normalized conditional state then
obeys a nonlinear stochastic Schrodinger equation driven by one white-noise
process per channel; unmonitored channels are simulated the same way and
their noise simply never reaches a detector.

Two equivalent readings of that equation are provided.  In the Ito reading
the increment uses start-of-step statistics,

    dpsi = A(psi) dtau + sum_c (c - <X_c>/2) psi dW_c,
    A(psi) = -i H psi + sum_c [ <X_c>/2 c - c'c/2 - <X_c>**2/8 ] psi,

with ``X_c = c + c'`` and expectations taken in psi.  In the Stratonovich
reading the same trajectory is generated by the record-driven flow

    dpsi/dtau = -i H psi + sum_c [ j_c (c - <X_c>/2)
                + (<X_c**2> - <[c, c']>)/4 - (c**2 + c'c)/2 ] psi,

where ``j_c = <X_c> + xi_c`` is the (pseudo-)current of channel c.  The two
drifts differ by a state-dependent conversion term, exposed here as
``ito_to_strat_correction`` so the equivalence can be checked directly.

The Ito form is integrated with Euler-Maruyama; the Stratonovich form with
the semi-implicit midpoint rule (fixed-point iteration on the half-step
state, noise increment held fixed).
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from .detector import (
    MIDPOINT_MODELS,
    CurrentModel,
    CurrentRecord,
    PhaseSchedule,
    filter_series,
)
from .fock import (
    FockSpace,
    PhaseVector,
    StateVector,
    batch_vdot,
    lower_amps,
    tail_population,
)
from .hamiltonians import HamiltonianKind, HamiltonianSpec, apply_hamiltonian


class Calculus(Enum):
    ITO = "ito"
    STRATONOVICH = "stratonovich"


class IntegrationError(RuntimeError):
    """The trajectory produced a non-finite or vanishing state."""


class TruncationBudgetError(IntegrationError):
    """Accumulated probability leakage past the cutoff exceeded the budget."""


def required_calculus(model: CurrentModel) -> Calculus:
    return Calculus.STRATONOVICH if model in MIDPOINT_MODELS else Calculus.ITO


@dataclass(frozen=True)
class StepConfig:
    """Integrator knobs shared by all schemes.

    ``truncation_budget`` bounds the time-integrated population sitting on
    the highest retained Fock level; exceeding it aborts the trajectory as
    untrustworthy rather than silently reflecting amplitude off the cutoff.
    """

    dt: float
    midpoint_iters: int = 4
    renorm: bool = True
    truncation_budget: float = 1e-6
    convergence_tol: float = 1e-8

    def __post_init__(self) -> None:
        if not (math.isfinite(self.dt) and self.dt > 0.0):
            raise ValueError("dt must be positive and finite")
        if self.midpoint_iters < 2:
            raise ValueError("midpoint iteration needs at least two passes")
        if self.truncation_budget <= 0.0:
            raise ValueError("truncation budget must be positive")
        if self.convergence_tol <= 0.0:
            raise ValueError("convergence tolerance must be positive")


@dataclass(frozen=True)
class SseDrift:
    """Everything defining the deterministic structure of the trajectory:
    coherent part, local-oscillator phases, and the calculus convention."""

    hamiltonian: HamiltonianSpec
    phases: PhaseVector
    calculus: Calculus = Calculus.STRATONOVICH

    def with_phases(self, phases: PhaseVector) -> "SseDrift":
        return dataclasses.replace(self, phases=phases)


@dataclass(frozen=True)
class Channel:
    mode: int
    power: int
    coeff: complex
    monitored: bool


@lru_cache(maxsize=None)
def channel_plan(space: FockSpace, drift: SseDrift) -> tuple[Channel, ...]:
    """Monitored channels for every mode first, then any unmonitored ones."""
    if len(drift.phases) != space.num_modes:
        raise ValueError(
            f"{len(drift.phases)} phases for {space.num_modes} modes"
        )
    drift.hamiltonian.check_space(space)
    plan = [
        Channel(mode=k, power=1, coeff=complex(np.exp(-1j * phi)), monitored=True)
        for k, phi in enumerate(drift.phases.angles)
    ]
    ham = drift.hamiltonian
    if ham.kind is HamiltonianKind.CIM and ham.nonlinear > 0.0:
        u = ham.nonlinear / math.sqrt(2.0)
        plan.extend(
            Channel(mode=k, power=2, coeff=complex(u), monitored=False)
            for k in range(space.num_modes)
        )
    return tuple(plan)


def num_channels(space: FockSpace, drift: SseDrift) -> int:
    return len(channel_plan(space, drift))


@lru_cache(maxsize=None)
def _mode_numbers(space: FockSpace, mode: int) -> np.ndarray:
    flat = np.arange(space.dimension)
    return np.unravel_index(flat, space.shape)[mode].astype(float)


@lru_cache(maxsize=None)
def _decay_diagonal(space: FockSpace, drift: SseDrift) -> np.ndarray:
    """Constant diagonal -(1/2) sum_c c'c, shared by both drift forms."""
    diag = np.zeros(space.dimension)
    for ch in channel_plan(space, drift):
        numbers = _mode_numbers(space, ch.mode)
        weights = numbers if ch.power == 1 else numbers * (numbers - 1.0)
        diag -= 0.5 * abs(ch.coeff) ** 2 * weights
    return diag


class _LowerCache:
    """Memoizes repeated applications of the lowering kernel per mode."""

    def __init__(self, space: FockSpace, amps: np.ndarray) -> None:
        self.space = space
        self.amps = amps
        self._store: dict[tuple[int, int], np.ndarray] = {}

    def get(self, mode: int, order: int) -> np.ndarray:
        if order == 0:
            return self.amps
        key = (mode, order)
        if key not in self._store:
            below = self.get(mode, order - 1)
            self._store[key] = lower_amps(self.space, below, mode)
        return self._store[key]


def _abs2(amps: np.ndarray) -> np.ndarray:
    return amps.real * amps.real + amps.imag * amps.imag


def _diag_mean(prob: np.ndarray, weights: np.ndarray, norm_sq: np.ndarray) -> np.ndarray:
    return np.einsum("...i,i->...", prob, weights) / norm_sq


def _drift_terms(
    space: FockSpace,
    drift: SseDrift,
    amps: np.ndarray,
    *,
    stratonovich: bool,
    xi: np.ndarray | None = None,
    current: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Assemble the full right-hand side; returns (rhs, per-channel <X_c>).

    For the Stratonovich form either an explicit per-channel record
    ``current`` is used, or the self-consistent one ``<X_c> + xi_c``.
    """
    plan = channel_plan(space, drift)
    cache = _LowerCache(space, amps)
    prob = _abs2(amps)
    norm_sq = np.maximum(prob.sum(axis=-1), 1e-300)
    lead = amps.shape[:-1]
    scal = np.zeros(lead)
    expect_x = np.empty(lead + (len(plan),))
    traj_terms: dict[tuple[int, int], np.ndarray] = {}
    const_terms: dict[tuple[int, int], complex] = {}

    def add_traj(mode: int, order: int, coefs: np.ndarray) -> None:
        key = (mode, order)
        if key in traj_terms:
            traj_terms[key] = traj_terms[key] + coefs
        else:
            traj_terms[key] = coefs

    for ci, ch in enumerate(plan):
        lowp = cache.get(ch.mode, ch.power)
        mean_c = ch.coeff * batch_vdot(amps, lowp) / norm_sq
        x = 2.0 * mean_c.real
        expect_x[..., ci] = x
        if stratonovich:
            j = current[..., ci] if current is not None else x + xi[..., ci]
            add_traj(ch.mode, ch.power, ch.coeff * j)
            low2p = cache.get(ch.mode, 2 * ch.power)
            mean_sq = (ch.coeff**2) * batch_vdot(amps, low2p) / norm_sq
            numbers = _mode_numbers(space, ch.mode)
            mag2 = abs(ch.coeff) ** 2
            if ch.power == 1:
                mean_cc = mag2 * _diag_mean(prob, numbers, norm_sq)
                comm = 1.0
            else:
                mean_n = _diag_mean(prob, numbers, norm_sq)
                mean_cc = mag2 * _diag_mean(prob, numbers * (numbers - 1.0), norm_sq)
                comm = mag2 * (4.0 * mean_n + 2.0)
            x_sq = 2.0 * mean_sq.real + 2.0 * mean_cc + comm
            scal += -0.5 * j * x + 0.25 * (x_sq - comm)
            key = (ch.mode, 2 * ch.power)
            const_terms[key] = const_terms.get(key, 0.0) - 0.5 * ch.coeff**2
        else:
            xi_c = xi[..., ci]
            add_traj(ch.mode, ch.power, ch.coeff * (0.5 * x + xi_c))
            scal += -0.125 * x * x - 0.5 * xi_c * x

    rhs = (scal[..., None] + _decay_diagonal(space, drift)) * amps
    for (mode, order), coefs in traj_terms.items():
        rhs += np.asarray(coefs)[..., None] * cache.get(mode, order)
    for (mode, order), const in const_terms.items():
        rhs += const * cache.get(mode, order)
    if drift.hamiltonian.kind is not HamiltonianKind.FREE:
        rhs += -1j * apply_hamiltonian(space, drift.hamiltonian, amps)
    return rhs, expect_x


def _correction_terms(
    space: FockSpace, drift: SseDrift, amps: np.ndarray
) -> np.ndarray:
    """Stratonovich-minus-Ito drift difference (no noise dependence)."""
    plan = channel_plan(space, drift)
    cache = _LowerCache(space, amps)
    prob = _abs2(amps)
    norm_sq = np.maximum(prob.sum(axis=-1), 1e-300)
    scal = np.zeros(amps.shape[:-1])
    rhs = np.zeros_like(amps)
    for ch in plan:
        lowp = cache.get(ch.mode, ch.power)
        mean_c = ch.coeff * batch_vdot(amps, lowp) / norm_sq
        x = 2.0 * mean_c.real
        low2p = cache.get(ch.mode, 2 * ch.power)
        mean_sq = (ch.coeff**2) * batch_vdot(amps, low2p) / norm_sq
        numbers = _mode_numbers(space, ch.mode)
        mag2 = abs(ch.coeff) ** 2
        if ch.power == 1:
            mean_cc = mag2 * _diag_mean(prob, numbers, norm_sq)
            comm = 1.0
        else:
            mean_n = _diag_mean(prob, numbers, norm_sq)
            mean_cc = mag2 * _diag_mean(prob, numbers * (numbers - 1.0), norm_sq)
            comm = mag2 * (4.0 * mean_n + 2.0)
        x_sq = 2.0 * mean_sq.real + 2.0 * mean_cc + comm
        scal += 0.25 * (x_sq - comm) - 0.375 * x * x
        rhs += np.asarray(0.5 * ch.coeff * x)[..., None] * lowp
        rhs += (-0.5 * ch.coeff**2) * low2p
    rhs += scal[..., None] * amps
    return rhs


def monitored_expect_x(
    space: FockSpace, drift: SseDrift, amps: np.ndarray
) -> np.ndarray:
    """<exp(-i phase_k) a_k + h.c.> for every monitored mode, batched."""
    prob_sum = np.maximum(_abs2(amps).sum(axis=-1), 1e-300)
    out = np.empty(amps.shape[:-1] + (space.num_modes,))
    for k, phi in enumerate(drift.phases.angles):
        mean = np.exp(-1j * phi) * batch_vdot(amps, lower_amps(space, amps, k))
        out[..., k] = 2.0 * mean.real / prob_sum
    return out


# ---------------------------------------------------------------------------
# public single-state drift API
# ---------------------------------------------------------------------------


def _check_channel_vector(space, drift, values, what: str) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    expected = num_channels(space, drift)
    if values.shape[-1] != expected:
        raise ValueError(
            f"{what} has {values.shape[-1]} entries; drift defines {expected} channels"
        )
    return values


def drift_ito(state: StateVector, drift: SseDrift, noise) -> StateVector:
    """Full Ito increment per unit time at noise level xi = dW/dtau."""
    if drift.calculus is not Calculus.ITO:
        raise ValueError("drift is declared Stratonovich; use drift_strat")
    xi = _check_channel_vector(state.space, drift, noise, "noise")
    rhs, _ = _drift_terms(
        state.space, drift, state.amplitudes, stratonovich=False, xi=xi
    )
    return StateVector(rhs, state.space)


def drift_strat(state: StateVector, drift: SseDrift, current) -> StateVector:
    """Record-driven Stratonovich drift; ``current`` has one entry per
    channel (monitored modes first)."""
    if drift.calculus is not Calculus.STRATONOVICH:
        raise ValueError("drift is declared Ito; use drift_ito")
    j = _check_channel_vector(state.space, drift, current, "current")
    rhs, _ = _drift_terms(
        state.space, drift, state.amplitudes, stratonovich=True, current=j
    )
    return StateVector(rhs, state.space)


def ito_to_strat_correction(state: StateVector, drift: SseDrift) -> StateVector:
    rhs = _correction_terms(state.space, drift, state.amplitudes)
    return StateVector(rhs, state.space)


# ---------------------------------------------------------------------------
# steppers
# ---------------------------------------------------------------------------


@dataclass
class StepResult:
    """One integrator step over a batch of trajectories.

    ``expect_x`` holds per-channel <X_c> at the state the drift was sampled
    from: the step start for Euler-Maruyama, the midpoint iterate for the
    semi-implicit rule.  ``raw_norm`` is the norm before renormalization.
    """

    amps: np.ndarray
    expect_x: np.ndarray
    raw_norm: np.ndarray
    rel_change: np.ndarray | None = None


def _finish_step(new_amps: np.ndarray, cfg: StepConfig) -> tuple[np.ndarray, np.ndarray]:
    raw = np.sqrt(np.asarray(_abs2(new_amps).sum(axis=-1)))
    if cfg.renorm:
        new_amps = new_amps / np.maximum(raw[..., None], 1e-300)
    return new_amps, raw


def step_euler(
    space: FockSpace,
    drift: SseDrift,
    amps: np.ndarray,
    xi: np.ndarray,
    cfg: StepConfig,
) -> StepResult:
    if drift.calculus is not Calculus.ITO:
        raise ValueError("Euler-Maruyama integrates the Ito form only")
    rhs, expect_x = _drift_terms(space, drift, amps, stratonovich=False, xi=xi)
    new_amps, raw = _finish_step(amps + cfg.dt * rhs, cfg)
    return StepResult(new_amps, expect_x, raw)


def step_midpoint(
    space: FockSpace,
    drift: SseDrift,
    amps: np.ndarray,
    xi: np.ndarray,
    cfg: StepConfig,
) -> StepResult:
    """Semi-implicit midpoint step with the noise rate held fixed.

    The half-step state is found by fixed-point iteration (a fixed number of
    passes; the final contraction is reported as ``rel_change``) and the full
    step is the midpoint extrapolation 2 * mid - start.
    """
    if drift.calculus is not Calculus.STRATONOVICH:
        raise ValueError("the midpoint rule integrates the Stratonovich form only")
    half = 0.5 * cfg.dt
    mid = amps
    prev = None
    expect_x = None
    for _ in range(cfg.midpoint_iters):
        rhs, expect_x = _drift_terms(space, drift, mid, stratonovich=True, xi=xi)
        prev = mid
        mid = amps + half * rhs
    delta = np.sqrt(_abs2(mid - prev).sum(axis=-1))
    scale = np.sqrt(_abs2(prev).sum(axis=-1))
    rel_change = delta / np.maximum(scale, 1e-300)
    new_amps, raw = _finish_step(2.0 * mid - amps, cfg)
    return StepResult(new_amps, expect_x, raw, rel_change=rel_change)


# ---------------------------------------------------------------------------
# noise supply
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class NoiseStream:
    """Deterministic per-trajectory Wiener increments.

    The generator is seeded with the (master seed, trajectory index) pair,
    so any trajectory can be reproduced in isolation and ensembles are
    independent of how trajectories are scheduled across workers.  Drawing
    one row at a time or a whole block yields the identical sequence.
    """

    master_seed: int
    trajectory_index: int
    num_channels: int
    dt: float

    def __post_init__(self) -> None:
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.num_channels < 1:
            raise ValueError("need at least one channel")
        self._rng = np.random.default_rng(
            [int(self.master_seed), int(self.trajectory_index)]
        )

    def block(self, rows: int) -> np.ndarray:
        """`rows` consecutive Wiener increments, shape (rows, num_channels)."""
        draws = self._rng.standard_normal((rows, self.num_channels))
        return draws * math.sqrt(self.dt)

    def increments(self) -> np.ndarray:
        return self.block(1)[0]


# ---------------------------------------------------------------------------
# full-trajectory integration
# ---------------------------------------------------------------------------


def _resolve_model(
    drift: SseDrift, current_model: CurrentModel | None
) -> CurrentModel:
    if current_model is None:
        return (
            CurrentModel.STRAT
            if drift.calculus is Calculus.STRATONOVICH
            else CurrentModel.ITO_SAME
        )
    needed = required_calculus(current_model)
    if needed is not drift.calculus:
        raise ValueError(
            f"current model {current_model.value!r} requires the "
            f"{needed.value} calculus but the drift is {drift.calculus.value}"
        )
    return current_model


def steps_for_horizon(horizon: float, dt: float) -> int:
    steps = round(horizon / dt)
    if steps < 1 or abs(steps * dt - horizon) > 1e-9 * max(1.0, abs(horizon)):
        raise ValueError(f"horizon {horizon} is not a positive multiple of dt {dt}")
    return int(steps)


def integrate_trajectory(
    initial: StateVector,
    drift: SseDrift,
    cfg: StepConfig,
    horizon: float,
    observer=None,
    *,
    noise: NoiseStream | None = None,
    current_model: CurrentModel | None = None,
    schedule: PhaseSchedule | None = None,
    kappa: float | None = None,
    keep_norms: bool = False,
) -> CurrentRecord:
    """Integrate one trajectory to ``horizon`` and return its record.

    ``observer(tau, state)``, if given, is called at every grid time
    including 0 and the horizon.  The record holds one current sample per
    step: at step midpoints for the ``STRAT`` model, at step starts for the
    Ito models (``ITO_DELAYED`` pairs the first sample with an extra
    off-grid noise draw so every sample has a one-step-old increment).
    """
    space = initial.space
    model = _resolve_model(drift, current_model)
    steps = steps_for_horizon(horizon, cfg.dt)
    if schedule is not None:
        if schedule.num_modes != space.num_modes:
            raise ValueError("schedule and space disagree on the mode count")
        if schedule.horizon is not None and schedule.horizon < horizon:
            raise ValueError("schedule ends before the integration horizon")
    channels = num_channels(space, drift)
    if noise is None:
        noise = NoiseStream(0, 0, channels, cfg.dt)
    if noise.num_channels != channels or abs(noise.dt - cfg.dt) > 1e-15:
        raise ValueError("noise stream does not match the drift channels or dt")

    increments = noise.block(steps + 1)
    xi_rows = increments / cfg.dt
    num_modes = space.num_modes
    midpoint = model in MIDPOINT_MODELS
    taus = (np.arange(steps) + 0.5) * cfg.dt if midpoint else np.arange(steps) * cfg.dt

    amps = initial.amplitudes.astype(complex, copy=True)
    currents = np.empty((steps, num_modes))
    expectations = np.empty((steps, num_modes))
    raw_norms = np.empty(steps) if keep_norms else None
    dropped = 0.0
    bad_steps = 0
    worst_residual = 0.0

    if observer is not None:
        observer(0.0, StateVector(amps.copy(), space))
    active = drift
    for n in range(steps):
        if schedule is not None:
            tau_eval = (n + 0.5) * cfg.dt if midpoint else n * cfg.dt
            phases = schedule.phase_at(tau_eval)
            if phases != active.phases:
                active = active.with_phases(phases)
        xi = xi_rows[n]
        if midpoint:
            result = step_midpoint(space, active, amps, xi, cfg)
            residual = float(result.rel_change)
            if residual > cfg.convergence_tol:
                bad_steps += 1
                worst_residual = max(worst_residual, residual)
            expectations[n] = result.expect_x[:num_modes]
            currents[n] = expectations[n] + xi[:num_modes]
        else:
            result = step_euler(space, active, amps, xi, cfg)
            expectations[n] = result.expect_x[:num_modes]
            if model is CurrentModel.ITO_DELAYED:
                prev = xi_rows[steps] if n == 0 else xi_rows[n - 1]
                currents[n] = expectations[n] + prev[:num_modes]
            else:
                currents[n] = expectations[n] + xi[:num_modes]
        amps = result.amps
        raw = float(result.raw_norm)
        if not np.isfinite(raw) or raw == 0.0:
            raise IntegrationError(
                f"state norm became {raw} at step {n} (tau={n * cfg.dt:.6g})"
            )
        if keep_norms:
            raw_norms[n] = raw
        dropped += cfg.dt * sum(
            tail_population(space, amps, k) for k in range(num_modes)
        )
        if dropped > cfg.truncation_budget:
            raise TruncationBudgetError(
                f"cutoff leakage {dropped:.3e} exceeded the budget "
                f"{cfg.truncation_budget:.3e} at step {n}; raise the cutoff"
            )
        if observer is not None:
            observer((n + 1) * cfg.dt, StateVector(amps.copy(), space))

    if bad_steps:
        warnings.warn(
            f"midpoint iteration stayed above tolerance in {bad_steps} of "
            f"{steps} steps (worst residual {worst_residual:.2e}); "
            "consider a smaller dt or more midpoint_iters",
            RuntimeWarning,
            stacklevel=2,
        )

    filtered = (
        filter_series(currents, kappa, cfg.dt) if kappa is not None else None
    )
    return CurrentRecord(
        dt=cfg.dt,
        taus=taus,
        currents=currents,
        expectations=expectations,
        model=model,
        filtered=filtered,
        kappa=kappa,
        raw_norms=raw_norms,
        dropped_probability=dropped,
        nonconverged_steps=bad_steps,
    )
