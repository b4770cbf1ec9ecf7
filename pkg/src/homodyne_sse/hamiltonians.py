"""Hamiltonian generators shared by the trajectory and density-matrix solvers.

Everything is expressed through matrix-free ladder kernels acting on the last
axis of a batched amplitude array, so the same ``apply_hamiltonian`` serves
single states, trajectory batches, and density-matrix rows alike.

Units: time is measured in inverse linear-loss rates, so all coefficients here
are dimensionless.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .fock import FockSpace, lower_amps, raise_amps


class HamiltonianKind(Enum):
    FREE = "free"
    CIM = "cim"


COUPLING_KINDS = ("parametric", "beamsplitter")


@dataclass(frozen=True)
class HamiltonianSpec:
    """Declarative description of the coherent part of the dynamics.

    ``FREE`` is the bare damped-mode problem (no Hamiltonian).  ``CIM`` is a
    network of degenerate parametric oscillators: each mode is pumped with
    amplitude ``pump`` through ``(i pump / 2) (adag_j^2 - a_j^2)``, loses pairs
    of photons at rate ``nonlinear**2 / 2`` (the dissipative part lives in the
    channel lists, not here), and is coupled to the other modes through a
    symmetric zero-diagonal matrix ``coupling`` scaled by ``coupling_strength``.

    Two coupling circuits are available:

    * ``"parametric"`` (default): ``(i zeta / 2) sum_{k!=j} C_kj
      (adag_k adag_j - a_k a_j)``.  This feeds the x quadrature of each mode
      by the x quadratures of its neighbours, so the sign pattern of the
      couplings is imprinted on the sign pattern of the oscillator
      quadratures -- the behaviour an Ising-machine readout needs.
    * ``"beamsplitter"``: ``-zeta sum_{k!=j} C_kj (adag_k a_j + adag_j a_k)``.
      An excitation-exchange circuit kept as an option; note that for two
      modes it rotates between x1-p2 and x2-p1 sectors and therefore never
      correlates the x quadratures with each other.
    """

    kind: HamiltonianKind = HamiltonianKind.FREE
    pump: float = 0.0
    nonlinear: float = 0.0
    coupling: tuple[tuple[float, ...], ...] | None = None
    coupling_strength: float = 0.0
    coupling_kind: str = "parametric"

    def __post_init__(self) -> None:
        if self.pump < 0.0 or self.nonlinear < 0.0:
            raise ValueError("pump and nonlinear coefficients must be >= 0")
        if self.coupling_kind not in COUPLING_KINDS:
            raise ValueError(
                f"coupling_kind must be one of {COUPLING_KINDS}, "
                f"got {self.coupling_kind!r}"
            )
        if self.coupling is not None:
            mat = np.asarray(self.coupling, dtype=float)
            if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
                raise ValueError("coupling matrix must be square")
            if np.any(np.diag(mat) != 0.0):
                raise ValueError("coupling matrix must have a zero diagonal")
            if not np.array_equal(mat, mat.T):
                raise ValueError("coupling matrix must be symmetric")

    @classmethod
    def free(cls) -> "HamiltonianSpec":
        return cls(kind=HamiltonianKind.FREE)

    @classmethod
    def cim(
        cls,
        pump: float,
        nonlinear: float,
        coupling: "np.ndarray | tuple[tuple[float, ...], ...]",
        coupling_strength: float = 0.2,
        coupling_kind: str = "parametric",
    ) -> "HamiltonianSpec":
        mat = np.asarray(coupling, dtype=float)
        frozen = tuple(tuple(float(v) for v in row) for row in mat)
        return cls(
            kind=HamiltonianKind.CIM,
            pump=pump,
            nonlinear=nonlinear,
            coupling=frozen,
            coupling_strength=coupling_strength,
            coupling_kind=coupling_kind,
        )

    def coupling_matrix(self) -> np.ndarray:
        if self.coupling is None:
            return np.zeros((0, 0))
        return np.asarray(self.coupling, dtype=float)

    def check_space(self, space: FockSpace) -> None:
        if self.coupling is not None and len(self.coupling) != space.num_modes:
            raise ValueError(
                f"coupling matrix is {len(self.coupling)}x{len(self.coupling)} "
                f"but the space has {space.num_modes} modes"
            )


def apply_hamiltonian(
    space: FockSpace, spec: HamiltonianSpec, amps: np.ndarray
) -> np.ndarray:
    """Return ``H amps`` with ``H`` built from ``spec``, batched on leading axes."""
    if spec.kind is HamiltonianKind.FREE:
        return np.zeros_like(amps)
    spec.check_space(space)
    out = np.zeros_like(amps)
    if spec.pump != 0.0:
        for k in range(space.num_modes):
            up2 = raise_amps(space, raise_amps(space, amps, k), k)
            down2 = lower_amps(space, lower_amps(space, amps, k), k)
            out += (0.5j * spec.pump) * (up2 - down2)
    zeta = spec.coupling_strength
    if zeta != 0.0 and spec.coupling is not None:
        mat = spec.coupling_matrix()
        for k in range(space.num_modes):
            for j in range(space.num_modes):
                ckj = mat[k, j]
                if j == k or ckj == 0.0:
                    continue
                if spec.coupling_kind == "parametric":
                    pair_up = raise_amps(space, raise_amps(space, amps, j), k)
                    pair_down = lower_amps(space, lower_amps(space, amps, j), k)
                    out += (0.5j * zeta * ckj) * (pair_up - pair_down)
                else:
                    hop = raise_amps(space, lower_amps(space, amps, j), k)
                    hop += raise_amps(space, lower_amps(space, amps, k), j)
                    out += (-zeta * ckj) * hop
    return out
