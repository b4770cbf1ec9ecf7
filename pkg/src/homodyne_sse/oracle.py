"""Deterministic reference solvers the stochastic code is tested against.

Contents:

* density-matrix evolution under damped (possibly pumped/coupled) dynamics,
  integrated with classic RK4 and matrix-free ladder kernels;
* quadrature-sign probabilities of a two-mode wavefunction, both on a
  Gauss-Hermite grid and through exact half-line overlap integrals;
* Ising energies and ground-state enumeration for spin readouts;
* closed-form moments of time-integrated output quadratures of a damped
  mode, used to fix entanglement-inference thresholds ahead of the
  stochastic runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .fock import (
    FockSpace,
    StateVector,
    apply_operator_product,
    lower_amps,
    tail_population,
)
from .hamiltonians import HamiltonianKind, HamiltonianSpec, apply_hamiltonian


class TraceDriftError(RuntimeError):
    """Raised when a density-matrix run loses probability beyond tolerance."""


class GridCoverageError(ValueError):
    """Raised when a state does not fit on the quadrature grid."""


# ---------------------------------------------------------------------------
# density matrices
# ---------------------------------------------------------------------------


@dataclass
class DensityMatrix:
    """Complex matrix over the Fock basis; treat as immutable."""

    elements: np.ndarray
    space: FockSpace

    def __post_init__(self) -> None:
        mat = np.asarray(self.elements, dtype=np.complex128)
        dim = self.space.dimension
        if mat.shape != (dim, dim):
            raise ValueError(
                f"density matrix shape {mat.shape} does not match dimension {dim}"
            )
        self.elements = mat

    @classmethod
    def from_state(cls, state: StateVector) -> "DensityMatrix":
        amps = state.amplitudes
        return cls(np.outer(amps, amps.conj()), state.space)

    def trace(self) -> float:
        return float(np.trace(self.elements).real)

    def hermiticity_defect(self) -> float:
        return float(np.max(np.abs(self.elements - self.elements.conj().T)))

    def expect(self, ops: Iterable[tuple[str, int]]) -> complex:
        return trace_expect(self.space, self.elements, ops)

    def validate(
        self,
        *,
        trace_tol: float = 1e-10,
        herm_tol: float = 1e-10,
        check_positive: bool = False,
        psd_tol: float = 1e-8,
    ) -> None:
        if abs(self.trace() - 1.0) > trace_tol:
            raise ValueError(f"trace deviates from 1 by {abs(self.trace() - 1.0):.3e}")
        defect = self.hermiticity_defect()
        if defect > herm_tol:
            raise ValueError(f"hermiticity defect {defect:.3e}")
        if check_positive:
            lowest = float(np.linalg.eigvalsh(self.elements)[0])
            if lowest < -psd_tol:
                raise ValueError(f"negative eigenvalue {lowest:.3e}")


@dataclass(frozen=True)
class LossChannel:
    """A photon-loss dissipator: ``photons=1`` for a_k, ``photons=2`` for a_k^2."""

    mode: int
    rate: float = 1.0
    photons: int = 1

    def __post_init__(self) -> None:
        if self.rate < 0.0:
            raise ValueError("loss rate must be >= 0")
        if self.photons not in (1, 2):
            raise ValueError("only single- and two-photon loss are supported")


def uniform_loss(space: FockSpace, rate: float = 1.0) -> tuple[LossChannel, ...]:
    """One linear loss channel per mode at the given (dimensionless) rate."""
    return tuple(LossChannel(mode=k, rate=rate) for k in range(space.num_modes))


def pair_loss(space: FockSpace, rate: float) -> tuple[LossChannel, ...]:
    """One two-photon loss channel per mode."""
    return tuple(LossChannel(mode=k, rate=rate, photons=2) for k in range(space.num_modes))


@lru_cache(maxsize=None)
def _number_weights(space: FockSpace, mode: int) -> np.ndarray:
    occ = np.unravel_index(np.arange(space.dimension), space.shape)[mode]
    return occ.astype(float)


def trace_expect(
    space: FockSpace, elements: np.ndarray, ops: Iterable[tuple[str, int]]
) -> complex:
    """Tr(O rho) with O given as ladder tokens, matrix-free."""
    acted = apply_operator_product(space, elements.T, list(ops))
    return complex(np.trace(acted))


def master_rhs(
    space: FockSpace,
    elements: np.ndarray,
    *,
    hamiltonian: HamiltonianSpec | None = None,
    channels: Sequence[LossChannel] = (),
) -> np.ndarray:
    """Time derivative of rho: commutator plus photon-loss dissipators.

    Left multiplication by a ladder operator is carried out by transposing,
    acting on the (then trailing) row index, and transposing back; the ladder
    matrices are real, so no conjugations appear there.
    """
    out = np.zeros_like(elements)
    if hamiltonian is not None and hamiltonian.kind is not HamiltonianKind.FREE:
        h_rho = apply_hamiltonian(space, hamiltonian, elements.T).T
        rho_h = np.conj(apply_hamiltonian(space, hamiltonian, np.conj(elements)))
        out += -1j * (h_rho - rho_h)
    for channel in channels:
        if channel.rate == 0.0:
            continue
        mode = space.check_mode(channel.mode)
        if channel.photons == 1:
            cols = lower_amps(space, elements, mode)
            sandwich = lower_amps(space, cols.T, mode).T
            weight = _number_weights(space, mode)
        else:
            cols = lower_amps(space, lower_amps(space, elements, mode), mode)
            sandwich = lower_amps(space, lower_amps(space, cols.T, mode), mode).T
            occ = _number_weights(space, mode)
            weight = occ * (occ - 1.0)
        out += channel.rate * (
            sandwich - 0.5 * (weight[:, None] * elements + elements * weight[None, :])
        )
    return out


@dataclass
class MasterRun:
    """Output grid of a density-matrix integration."""

    taus: np.ndarray
    observables: dict[str, np.ndarray]
    traces: np.ndarray
    final: DensityMatrix
    states: list[DensityMatrix] | None = None


def integrate_master(
    rho0: DensityMatrix,
    hamiltonian: HamiltonianSpec | None,
    channels: Sequence[LossChannel],
    dt: float,
    tau_max: float,
    *,
    substeps: int = 10,
    observables: Mapping[str, Sequence[tuple[str, int]]] | None = None,
    keep_states: bool = False,
    trace_tol: float = 1e-8,
) -> MasterRun:
    """RK4 evolution of rho on the grid n*dt, n = 0..tau_max/dt.

    ``substeps`` internal RK4 steps are taken per output interval.
    Requested observables are recorded as real parts of Tr(O rho); they are
    meant for Hermitian O.  Aborts if the trace leaves 1 by ``trace_tol``.
    """
    if dt <= 0.0 or tau_max < 0.0:
        raise ValueError("dt must be positive and tau_max nonnegative")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    n_out = int(round(tau_max / dt))
    if abs(n_out * dt - tau_max) > 1e-9 * max(1.0, tau_max):
        raise ValueError("tau_max must be a multiple of dt")
    space = rho0.space
    obs_spec = {name: list(ops) for name, ops in (observables or {}).items()}
    taus = dt * np.arange(n_out + 1)
    series: dict[str, np.ndarray] = {
        name: np.empty(n_out + 1) for name in obs_spec
    }
    traces = np.empty(n_out + 1)
    kept: list[DensityMatrix] | None = [] if keep_states else None

    rho = rho0.elements.copy()
    h = dt / substeps
    for n in range(n_out + 1):
        tr = float(np.trace(rho).real)
        traces[n] = tr
        if abs(tr - 1.0) > trace_tol:
            raise TraceDriftError(
                f"trace drifted to {tr!r} at tau={taus[n]:.6g} (tol {trace_tol:g})"
            )
        for name, ops in obs_spec.items():
            series[name][n] = trace_expect(space, rho, ops).real
        if kept is not None:
            kept.append(DensityMatrix(rho.copy(), space))
        if n == n_out:
            break
        for _ in range(substeps):
            k1 = master_rhs(space, rho, hamiltonian=hamiltonian, channels=channels)
            k2 = master_rhs(
                space, rho + 0.5 * h * k1, hamiltonian=hamiltonian, channels=channels
            )
            k3 = master_rhs(
                space, rho + 0.5 * h * k2, hamiltonian=hamiltonian, channels=channels
            )
            k4 = master_rhs(
                space, rho + h * k3, hamiltonian=hamiltonian, channels=channels
            )
            rho = rho + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return MasterRun(
        taus=taus,
        observables=series,
        traces=traces,
        final=DensityMatrix(rho, space),
        states=kept,
    )


def damped_quadrature_self_moment(r: float, tau: "float | np.ndarray"):
    """<x_k^2> of a damped two-mode squeezed state: 1 + e^{-tau}(cosh 2r - 1).

    Solves d<x^2>/dtau = -( <x^2> - 1 ) under unit-rate linear loss starting
    from cosh 2r; the vacuum contribution survives at late times.
    """
    return 1.0 + np.exp(-tau) * (np.cosh(2.0 * r) - 1.0)


# ---------------------------------------------------------------------------
# quadrature-sign probabilities
# ---------------------------------------------------------------------------


def _stripped_hermite_table(nodes: np.ndarray, max_level: int) -> np.ndarray:
    """p_n(y) = phi_n(y) e^{y^2/2} for oscillator eigenfunctions phi_n.

    Stripping the Gaussian keeps the recurrence overflow-free and pairs with
    raw Gauss-Hermite weights: sum_i w_i p_m(y_i) p_n(y_i) = delta_mn.
    """
    table = np.zeros((max_level + 1, len(nodes)))
    table[0] = np.pi ** -0.25
    if max_level >= 1:
        table[1] = np.sqrt(2.0) * nodes * table[0]
    for n in range(1, max_level):
        table[n + 1] = nodes * np.sqrt(2.0 / (n + 1)) * table[n] - np.sqrt(
            n / (n + 1.0)
        ) * table[n - 1]
    return table


@dataclass(frozen=True, eq=False)
class QuadratureGrid:
    """Gauss-Hermite nodes/weights plus eigenfunction values for one mode.

    ``nodes`` live in the standard Hermite variable y (the unit-variance
    quadrature is x = sqrt(2) y); sign probabilities are scale-invariant, so
    no Jacobian appears anywhere.  ``hermite_table[n]`` holds the
    Gaussian-stripped eigenfunction p_n at the nodes.
    """

    nodes: np.ndarray
    weights: np.ndarray
    hermite_table: np.ndarray

    @property
    def max_level(self) -> int:
        return self.hermite_table.shape[0] - 1

    @property
    def num_points(self) -> int:
        return len(self.nodes)

    @classmethod
    def for_cutoff(cls, max_level: int, num_points: int | None = None) -> "QuadratureGrid":
        if max_level < 0:
            raise ValueError("max_level must be >= 0")
        if num_points is None:
            num_points = 2 * (max_level + 1)
        if num_points < max_level + 1:
            raise ValueError("grid has fewer points than basis levels")
        nodes, weights = np.polynomial.hermite.hermgauss(num_points)
        return cls(nodes, weights, _stripped_hermite_table(nodes, max_level))

    def normalization_defect(self) -> float:
        norms = self.weights @ (self.hermite_table**2).T
        return float(np.max(np.abs(norms - 1.0)))


@dataclass(frozen=True)
class SignProbabilities:
    """Joint quadrature-sign masses of a two-mode state."""

    pp: float
    pm: float
    mp: float
    mm: float

    @property
    def total(self) -> float:
        return self.pp + self.pm + self.mp + self.mm

    @property
    def same_sign(self) -> float:
        return self.pp + self.mm

    def as_dict(self) -> dict[str, float]:
        return {"pp": self.pp, "pm": self.pm, "mp": self.mp, "mm": self.mm}


def _amplitude_matrix(state: StateVector) -> np.ndarray:
    space = state.space
    if space.num_modes != 2:
        raise ValueError("sign probabilities are defined for two-mode states")
    levels = tuple(c + 1 for c in space.cutoffs)
    return state.amplitudes.reshape(levels)


def _check_grid_coverage(state: StateVector, tail_tol: float = 1e-6) -> None:
    space = state.space
    for mode in range(space.num_modes):
        tail = float(tail_population(space, state.amplitudes, mode))
        if tail > tail_tol:
            raise GridCoverageError(
                f"mode {mode} holds {tail:.3e} probability at the cutoff level; "
                "the position-basis expansion is not trustworthy"
            )


def sign_probabilities(state: StateVector, grid: QuadratureGrid) -> SignProbabilities:
    """Quadrant masses of |psi(x1,x2)|^2 by splitting grid nodes by sign.

    The node-sign split integrates the half-lines only approximately (the
    quadrature rule is exact for full-line integrals); the resulting bias
    falls off like 1/num_points.  ``sign_probabilities_exact`` has none.
    """
    amps = _amplitude_matrix(state)
    _check_grid_coverage(state)
    levels = amps.shape
    if grid.max_level < max(levels) - 1:
        raise GridCoverageError(
            f"grid carries levels up to {grid.max_level} but the state needs "
            f"{max(levels) - 1}"
        )
    t1 = grid.hermite_table[: levels[0]]
    t2 = grid.hermite_table[: levels[1]]
    psi = t1.T @ amps @ t2
    density = (grid.weights[:, None] * grid.weights[None, :]) * np.abs(psi) ** 2
    pos = grid.nodes > 0.0
    neg = ~pos
    return SignProbabilities(
        pp=float(density[np.ix_(pos, pos)].sum()),
        pm=float(density[np.ix_(pos, neg)].sum()),
        mp=float(density[np.ix_(neg, pos)].sum()),
        mm=float(density[np.ix_(neg, neg)].sum()),
    )


@lru_cache(maxsize=None)
def half_range_overlaps(max_level: int) -> np.ndarray:
    """S_mn = integral over x >= 0 of phi_m(x) phi_n(x) dx, exactly.

    Diagonal entries are 1/2; same-parity off-diagonal entries vanish; the
    rest follow from the Wronskian of the oscillator ODE evaluated at 0,
    S_mn = (phi_m'(0) phi_n(0) - phi_m(0) phi_n'(0)) / (2 (m - n)).
    """
    n = max_level + 1
    values = np.zeros(n)
    slopes = np.zeros(n)
    values[0] = np.pi ** -0.25
    if n > 1:
        slopes[1] = np.sqrt(2.0) * values[0]
    for k in range(1, n - 1):
        values[k + 1] = -np.sqrt(k / (k + 1.0)) * values[k - 1]
        slopes[k + 1] = np.sqrt(2.0 / (k + 1)) * values[k] - np.sqrt(
            k / (k + 1.0)
        ) * slopes[k - 1]
    overlaps = np.full((n, n), 0.5) * np.eye(n)
    for m in range(n):
        for l in range(n):
            if m != l:
                overlaps[m, l] = (slopes[m] * values[l] - values[m] * slopes[l]) / (
                    2.0 * (m - l)
                )
    overlaps.setflags(write=False)
    return overlaps


def _mode_projectors(levels: int) -> tuple[np.ndarray, np.ndarray]:
    plus = half_range_overlaps(levels - 1)[:levels, :levels]
    parity = np.where(np.arange(levels) % 2 == 0, 1.0, -1.0)
    minus = parity[:, None] * plus * parity[None, :]
    return plus, minus


def sign_probabilities_exact(state: StateVector) -> SignProbabilities:
    """Quadrant masses via exact half-line overlap integrals (no grid)."""
    amps = _amplitude_matrix(state)
    _check_grid_coverage(state)
    p1, m1 = _mode_projectors(amps.shape[0])
    p2, m2 = _mode_projectors(amps.shape[1])

    def mass(left: np.ndarray, right: np.ndarray) -> float:
        return float(np.vdot(amps, left @ amps @ right).real)

    return SignProbabilities(
        pp=mass(p1, p2), pm=mass(p1, m2), mp=mass(m1, p2), mm=mass(m1, m2)
    )


def same_sign_probability(space: FockSpace, amps: np.ndarray) -> np.ndarray:
    """P(++) + P(--) for a batch of two-mode states, exact overlaps.

    ``amps`` has the flat Fock index on the last axis; leading axes are batch
    axes.  States are assumed normalized.
    """
    if space.num_modes != 2:
        raise ValueError("same_sign_probability needs a two-mode space")
    levels = tuple(c + 1 for c in space.cutoffs)
    mats = amps.reshape(amps.shape[:-1] + levels)
    p1, m1 = _mode_projectors(levels[0])
    p2, m2 = _mode_projectors(levels[1])
    pp = np.einsum("...mn,...mn->...", mats.conj(), p1 @ mats @ p2).real
    mm = np.einsum("...mn,...mn->...", mats.conj(), m1 @ mats @ m2).real
    return pp + mm


# ---------------------------------------------------------------------------
# Ising readout
# ---------------------------------------------------------------------------


def ising_energy(spins: Sequence[int], coupling: np.ndarray) -> float:
    """E = -sum_{kj} C_kj s_k s_j over the full (ordered) index pairs."""
    sigma = np.asarray(spins)
    if not np.all(np.isin(sigma, (-1, 1))):
        raise ValueError("spins must be +1 or -1")
    mat = np.asarray(coupling, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError("coupling matrix must be square")
    if mat.shape[0] != sigma.size:
        raise ValueError("spin vector and coupling matrix sizes differ")
    if np.any(np.diag(mat) != 0.0):
        raise ValueError("coupling matrix must have a zero diagonal")
    return float(-(sigma @ mat @ sigma))


def ground_states(coupling: np.ndarray) -> tuple[float, tuple[tuple[int, ...], ...]]:
    """Exhaustive minimum of the Ising energy over {-1,+1}^M (M <= 20)."""
    mat = np.asarray(coupling, dtype=float)
    num = mat.shape[0]
    if num > 20:
        raise ValueError("exhaustive enumeration is capped at 20 spins")
    best = np.inf
    winners: list[tuple[int, ...]] = []
    for code in range(2**num):
        sigma = tuple(1 if code & (1 << k) else -1 for k in range(num))
        energy = ising_energy(sigma, mat)
        if energy < best - 1e-12:
            best = energy
            winners = [sigma]
        elif abs(energy - best) <= 1e-12:
            winners.append(sigma)
    return float(best), tuple(winners)


# ---------------------------------------------------------------------------
# integrated-output moments of a damped mode
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BinnedOutputMoments:
    """Second moments of B_k = integral_0^T of the output quadrature record.

    For a pair of unit-rate damped modes prepared in a two-mode squeezed
    state, each integrated record decomposes into the initial intracavity
    quadrature leaking out with gain ``gain`` = 2 (1 - e^{-T/2}) plus vacuum
    input noise, giving

        Var(B_k)      = T + gain^2 (cosh 2r - 1)
        Cov(B_1, B_2) = +/- gain^2 sinh 2r   (x-x / p-p records)

    and Var = T for vacuum input.
    """

    window: float
    gain: float
    variance: float
    covariance_x: float
    covariance_p: float

    @property
    def vacuum_variance(self) -> float:
        return self.window

    def inferred_variance(self, covariance: float) -> float:
        return self.variance - covariance**2 / self.variance

    @property
    def inference_product(self) -> float:
        return self.inferred_variance(self.covariance_x) * self.inferred_variance(
            self.covariance_p
        )

    @property
    def vacuum_product(self) -> float:
        return self.vacuum_variance**2


def binned_output_moments(r: float, window: float) -> BinnedOutputMoments:
    if window <= 0.0:
        raise ValueError("window must be positive")
    gain = 2.0 * (1.0 - np.exp(-window / 2.0))
    variance = window + gain**2 * (np.cosh(2.0 * r) - 1.0)
    covariance = gain**2 * np.sinh(2.0 * r)
    return BinnedOutputMoments(
        window=float(window),
        gain=float(gain),
        variance=float(variance),
        covariance_x=float(covariance),
        covariance_p=float(-covariance),
    )
