"""Truncated multimode bosonic Fock space with matrix-free ladder operators.

Amplitude vectors are indexed by the flat C-order product basis over the
per-mode occupation numbers.  Operators act by reshaping to the per-mode
tensor layout and shifting along one axis, so nothing quadratic in the
Hilbert-space dimension is ever built.  The array kernels accept an
arbitrary number of leading batch axes, which is what the ensemble
integrator relies on; the thin :class:`StateVector` wrapper gives the
single-state interface used everywhere else.

All operations are pure: input arrays are never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * np.pi

#: operator tokens accepted by :func:`apply_operator_product` / :func:`pair_expect`
OPERATOR_NAMES = ("a", "adag", "n", "x", "p")


class NormalizationError(ValueError):
    """State norm is too far from one for the requested expectation."""


@dataclass(frozen=True)
class FockSpace:
    """Truncated product Fock space for ``num_modes`` bosonic modes.

    ``cutoffs[k]`` is the highest occupation retained for mode ``k``
    (inclusive), so mode ``k`` carries ``cutoffs[k] + 1`` levels and the
    total dimension is the product of the per-mode level counts.
    """

    num_modes: int
    cutoffs: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.num_modes < 1:
            raise ValueError("need at least one mode")
        cutoffs = tuple(int(c) for c in self.cutoffs)
        object.__setattr__(self, "cutoffs", cutoffs)
        if len(cutoffs) != self.num_modes:
            raise ValueError(
                f"expected {self.num_modes} cutoffs, got {len(cutoffs)}"
            )
        if any(c < 1 for c in cutoffs):
            raise ValueError("every cutoff must be at least 1")

    @classmethod
    def uniform(cls, num_modes: int, cutoff: int) -> "FockSpace":
        """Space with the same occupation cutoff for every mode."""
        return cls(num_modes, (cutoff,) * num_modes)

    @property
    def shape(self) -> tuple[int, ...]:
        """Per-mode level counts ``(cutoff_k + 1, ...)``."""
        return tuple(c + 1 for c in self.cutoffs)

    @property
    def dimension(self) -> int:
        out = 1
        for n in self.shape:
            out *= n
        return out

    def check_mode(self, mode: int) -> int:
        mode = int(mode)
        if not 0 <= mode < self.num_modes:
            raise ValueError(
                f"mode index {mode} out of range for {self.num_modes} modes"
            )
        return mode

    def index_of(self, occupation: Sequence[int]) -> int:
        """Flat index of the basis state ``|n_0, ..., n_{M-1}>``."""
        occ = tuple(int(n) for n in occupation)
        if len(occ) != self.num_modes:
            raise ValueError("occupation tuple has wrong length")
        for k, n in enumerate(occ):
            if not 0 <= n <= self.cutoffs[k]:
                raise ValueError(
                    f"occupation {n} outside [0, {self.cutoffs[k]}] for mode {k}"
                )
        return int(np.ravel_multi_index(occ, self.shape))

    def occupation_of(self, index: int) -> tuple[int, ...]:
        """Inverse of :meth:`index_of`."""
        index = int(index)
        if not 0 <= index < self.dimension:
            raise ValueError(f"flat index {index} out of range")
        return tuple(int(n) for n in np.unravel_index(index, self.shape))


@dataclass(frozen=True)
class PhaseVector:
    """Local-oscillator phases, one angle per mode."""

    angles: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))

    @classmethod
    def of(cls, *angles: float) -> "PhaseVector":
        return cls(tuple(angles))

    def __len__(self) -> int:
        return len(self.angles)

    def canonical(self) -> "PhaseVector":
        """Angles reduced to ``[0, 2*pi)`` for comparisons."""
        return PhaseVector(tuple(float(a % TWO_PI) for a in self.angles))

    def as_array(self) -> np.ndarray:
        return np.array(self.angles, dtype=float)


# ---------------------------------------------------------------------------
# array kernels (batched; last axis is the flat Fock index)
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _root_table(levels: int) -> np.ndarray:
    # sqrt(1), sqrt(2), ..., sqrt(levels)
    return np.sqrt(np.arange(1, levels + 1, dtype=float))


def _tensor_view(space: FockSpace, amps: np.ndarray) -> tuple[np.ndarray, int]:
    if amps.shape[-1] != space.dimension:
        raise ValueError(
            f"amplitude array has last axis {amps.shape[-1]}, "
            f"expected {space.dimension}"
        )
    batch = amps.shape[:-1]
    return amps.reshape(batch + space.shape), len(batch)


def lower_amps(space: FockSpace, amps: np.ndarray, mode: int) -> np.ndarray:
    """Annihilation operator for ``mode`` applied to flat amplitudes."""
    mode = space.check_mode(mode)
    t, nb = _tensor_view(space, amps)
    axis = nb + mode
    levels = space.cutoffs[mode]
    w = _root_table(levels).reshape((levels,) + (1,) * (t.ndim - axis - 1))
    out = np.zeros_like(t)
    dst = [slice(None)] * t.ndim
    src = [slice(None)] * t.ndim
    dst[axis] = slice(0, levels)
    src[axis] = slice(1, None)
    out[tuple(dst)] = w * t[tuple(src)]
    return out.reshape(amps.shape)


def raise_amps(space: FockSpace, amps: np.ndarray, mode: int) -> np.ndarray:
    """Creation operator for ``mode``.

    The amplitude sitting at the cutoff level would be mapped above the
    truncation and is dropped; the probability lost this way equals the
    input state's top-level population (see :func:`tail_population`).
    """
    mode = space.check_mode(mode)
    t, nb = _tensor_view(space, amps)
    axis = nb + mode
    levels = space.cutoffs[mode]
    w = _root_table(levels).reshape((levels,) + (1,) * (t.ndim - axis - 1))
    out = np.zeros_like(t)
    dst = [slice(None)] * t.ndim
    src = [slice(None)] * t.ndim
    dst[axis] = slice(1, None)
    src[axis] = slice(0, levels)
    out[tuple(dst)] = w * t[tuple(src)]
    return out.reshape(amps.shape)


def tail_population(space: FockSpace, amps: np.ndarray, mode: int):
    """Probability weight sitting at the cutoff level of ``mode``.

    Returns a scalar for a 1-D amplitude array, or an array over the batch
    axes otherwise.
    """
    mode = space.check_mode(mode)
    t, nb = _tensor_view(space, amps)
    axis = nb + mode
    idx = [slice(None)] * t.ndim
    idx[axis] = space.cutoffs[mode]
    top = t[tuple(idx)]
    reduce_axes = tuple(range(nb, top.ndim))
    out = np.sum(np.abs(top) ** 2, axis=reduce_axes) if reduce_axes else np.abs(top) ** 2
    return out


def batch_vdot(bra: np.ndarray, ket: np.ndarray) -> np.ndarray:
    """``<bra|ket>`` along the last axis, batched over leading axes."""
    return np.einsum("...i,...i->...", bra.conj(), ket)


def apply_operator_product(
    space: FockSpace, amps: np.ndarray, ops: Iterable[tuple[str, int]]
) -> np.ndarray:
    """Apply a product of ladder-built operators, rightmost factor first.

    ``ops`` is a sequence of ``(name, mode)`` tokens read in operator order,
    e.g. ``[("x", 0), ("x", 1)]`` applies ``x_1`` and then ``x_0``.
    Accepted names: ``a``, ``adag``, ``n``, ``x``, ``p``.
    """
    tokens = list(ops)
    out = amps
    for name, mode in reversed(tokens):
        if name not in OPERATOR_NAMES:
            raise ValueError(f"unknown operator token {name!r}")
        mode = space.check_mode(mode)
        if name == "a":
            out = lower_amps(space, out, mode)
        elif name == "adag":
            out = raise_amps(space, out, mode)
        elif name == "n":
            out = raise_amps(space, lower_amps(space, out, mode), mode)
        elif name == "x":
            out = lower_amps(space, out, mode) + raise_amps(space, out, mode)
        else:  # p = (a - adag) / i
            out = -1j * (lower_amps(space, out, mode) - raise_amps(space, out, mode))
    return out


# ---------------------------------------------------------------------------
# single-state interface
# ---------------------------------------------------------------------------


@dataclass
class StateVector:
    """Flat complex amplitude vector on a :class:`FockSpace`.

    Treat instances as immutable; every operation returns a new vector.
    """

    amplitudes: np.ndarray
    space: FockSpace

    def __post_init__(self) -> None:
        amps = np.asarray(self.amplitudes, dtype=np.complex128)
        if amps.ndim != 1:
            raise ValueError("StateVector amplitudes must be one-dimensional")
        if amps.size != self.space.dimension:
            raise ValueError(
                f"amplitude length {amps.size} does not match space "
                f"dimension {self.space.dimension}"
            )
        self.amplitudes = amps

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalized(self) -> "StateVector":
        n = self.norm()
        if n < 1e-300:
            raise ValueError("cannot normalize a zero state")
        return StateVector(self.amplitudes / n, self.space)

    def tail_population(self, mode: int) -> float:
        return float(tail_population(self.space, self.amplitudes, mode))

    def copy(self) -> "StateVector":
        return StateVector(self.amplitudes.copy(), self.space)


def basis_state(space: FockSpace, occupation: Sequence[int]) -> StateVector:
    """Product number state ``|n_0, ..., n_{M-1}>``."""
    amps = np.zeros(space.dimension, dtype=np.complex128)
    amps[space.index_of(occupation)] = 1.0
    return StateVector(amps, space)


def vacuum_state(space: FockSpace) -> StateVector:
    return basis_state(space, (0,) * space.num_modes)


def annihilate(state: StateVector, mode: int) -> StateVector:
    """``a_mode |psi>``."""
    return StateVector(lower_amps(state.space, state.amplitudes, mode), state.space)


def create(state: StateVector, mode: int) -> StateVector:
    """``adag_mode |psi>`` with outflow above the cutoff dropped."""
    return StateVector(raise_amps(state.space, state.amplitudes, mode), state.space)


def quadrature_expect(state: StateVector, mode: int, phase: float = 0.0) -> float:
    """Mean of the rotated quadrature ``a e^{-i phase} + adag e^{i phase}``.

    Requires a normalized state; a norm off by more than 1e-6 raises
    :class:`NormalizationError` so silent drift is caught early.
    """
    n = state.norm()
    if abs(n - 1.0) > 1e-6:
        raise NormalizationError(
            f"quadrature_expect needs a normalized state (norm = {n:.9f})"
        )
    low = lower_amps(state.space, state.amplitudes, mode)
    val = batch_vdot(state.amplitudes, low)
    return float(2.0 * np.real(np.exp(-1j * float(phase)) * val))


def pair_expect(state: StateVector, ops: Iterable[tuple[str, int]]) -> complex:
    """``<psi| O_1 O_2 ... |psi>`` for a product of ladder-built factors.

    See :func:`apply_operator_product` for the token grammar.
    """
    applied = apply_operator_product(state.space, state.amplitudes, ops)
    return complex(batch_vdot(state.amplitudes, applied))
