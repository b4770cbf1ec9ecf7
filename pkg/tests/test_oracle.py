import numpy as np
import pytest

from homodyne_sse.fock import FockSpace, basis_state, vacuum_state
from homodyne_sse.hamiltonians import HamiltonianSpec
from homodyne_sse.oracle import (
    BinnedOutputMoments,
    DensityMatrix,
    GridCoverageError,
    LossChannel,
    QuadratureGrid,
    TraceDriftError,
    binned_output_moments,
    damped_quadrature_self_moment,
    ground_states,
    half_range_overlaps,
    integrate_master,
    ising_energy,
    master_rhs,
    pair_loss,
    same_sign_probability,
    sign_probabilities,
    sign_probabilities_exact,
    trace_expect,
    uniform_loss,
)
from homodyne_sse.states import SqueezeParams, tmss

SINH_1 = 1.1752011936438014
COSH_1 = 1.5430806348152437


def tmss_density(r=0.5, cutoff=15):
    space = FockSpace.uniform(2, cutoff)
    state = tmss(SqueezeParams(r=r, cutoff=cutoff), space)
    return space, DensityMatrix.from_state(state)


def test_vacuum_is_steady():
    space = FockSpace.uniform(2, 4)
    rho = DensityMatrix.from_state(vacuum_state(space))
    rhs = master_rhs(space, rho.elements, channels=uniform_loss(space))
    assert np.max(np.abs(rhs)) == 0.0


def test_single_photon_decay_rate():
    space = FockSpace.uniform(1, 4)
    rho = DensityMatrix.from_state(basis_state(space, [1]))
    rhs = master_rhs(space, rho.elements, channels=uniform_loss(space))
    dn = trace_expect(space, rhs, [("n", 0)]).real
    assert abs(dn + 1.0) < 1e-12


def test_tmss_cross_moment_initial_rate():
    space, rho = tmss_density()
    rhs = master_rhs(space, rho.elements, channels=uniform_loss(space))
    xx = trace_expect(space, rho.elements, [("x", 0), ("x", 1)]).real
    dxx = trace_expect(space, rhs, [("x", 0), ("x", 1)]).real
    assert abs(xx - SINH_1) < 1e-8
    assert abs(dxx + xx) < 1e-8


def test_two_photon_loss_number_rate():
    # d<n>/dtau = -2 u <n(n-1)> for the pair-loss dissipator alone.
    space = FockSpace.uniform(1, 6)
    rho = DensityMatrix.from_state(basis_state(space, [2]))
    rate = 0.3
    rhs = master_rhs(space, rho.elements, channels=pair_loss(space, rate))
    dn = trace_expect(space, rhs, [("n", 0)]).real
    assert abs(dn + 2.0 * rate * 2.0) < 1e-12

    rng = np.random.default_rng(5)
    amps = rng.normal(size=7) + 1j * rng.normal(size=7)
    amps *= 0.4 ** np.arange(7)
    amps /= np.linalg.norm(amps)
    rho2 = np.outer(amps, amps.conj())
    rhs2 = master_rhs(space, rho2, channels=pair_loss(space, rate))
    dn2 = trace_expect(space, rhs2, [("n", 0)]).real
    nn = trace_expect(
        space, rho2, [("adag", 0), ("adag", 0), ("a", 0), ("a", 0)]
    ).real
    assert abs(dn2 + 2.0 * rate * nn) < 1e-10


def test_master_decay_curves_match_closed_forms():
    space, rho = tmss_density()
    run = integrate_master(
        rho,
        None,
        uniform_loss(space),
        dt=0.05,
        tau_max=1.0,
        observables={
            "xx": [("x", 0), ("x", 1)],
            "n1": [("n", 0)],
            "x1sq": [("x", 0), ("x", 0)],
        },
    )
    taus = run.taus
    assert np.max(np.abs(run.observables["xx"] - np.exp(-taus) * SINH_1)) < 1e-6
    sinh_sq = (COSH_1 - 1.0) / 2.0
    assert np.max(np.abs(run.observables["n1"] - np.exp(-taus) * sinh_sq)) < 1e-6
    self_true = damped_quadrature_self_moment(0.5, taus)
    assert np.max(np.abs(run.observables["x1sq"] - self_true)) < 1e-6
    # The e^{-tau} cosh 2r curve drops to zero instead of the vacuum level;
    # the integrator decides and disagrees with it by a wide margin.
    naive = np.exp(-taus) * COSH_1
    assert np.max(np.abs(run.observables["x1sq"] - naive)) > 0.5
    run.final.validate(trace_tol=1e-8, herm_tol=1e-8, check_positive=True)


def test_master_substep_halving_agrees():
    space, rho = tmss_density(cutoff=6)
    runs = [
        integrate_master(
            rho,
            None,
            uniform_loss(space),
            dt=0.1,
            tau_max=0.5,
            substeps=s,
            observables={"xx": [("x", 0), ("x", 1)]},
        )
        for s in (10, 20)
    ]
    assert np.max(np.abs(runs[0].observables["xx"] - runs[1].observables["xx"])) < 1e-10


def test_master_with_pump_hamiltonian_grows_energy():
    space = FockSpace.uniform(1, 12)
    rho = DensityMatrix.from_state(vacuum_state(space))
    spec = HamiltonianSpec.cim(pump=0.8, nonlinear=0.0, coupling=[[0.0]])
    run = integrate_master(
        rho,
        spec,
        uniform_loss(space),
        dt=0.05,
        tau_max=0.5,
        observables={"n": [("n", 0)]},
    )
    n_curve = run.observables["n"]
    assert n_curve[0] == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.diff(n_curve) > 0.0)
    run.final.validate(trace_tol=1e-8, herm_tol=1e-8)


def test_trace_drift_aborts():
    space = FockSpace.uniform(1, 3)
    rho = DensityMatrix.from_state(basis_state(space, [3]))
    with pytest.raises(TraceDriftError):
        integrate_master(
            rho, None, uniform_loss(space), dt=2.0, tau_max=20.0, substeps=1
        )


def test_grid_mismatch_rejected():
    space = FockSpace.uniform(1, 3)
    rho = DensityMatrix.from_state(vacuum_state(space))
    with pytest.raises(ValueError):
        integrate_master(rho, None, uniform_loss(space), dt=0.3, tau_max=1.0)


def test_density_matrix_validation():
    space = FockSpace.uniform(1, 2)
    rho = DensityMatrix.from_state(basis_state(space, [1]))
    rho.validate(check_positive=True)
    bad = DensityMatrix(2.0 * rho.elements, space)
    with pytest.raises(ValueError):
        bad.validate()
    with pytest.raises(ValueError):
        DensityMatrix(np.eye(5), space)


def test_quadrature_grid_orthonormality():
    grid = QuadratureGrid.for_cutoff(15)
    assert grid.num_points == 32
    assert grid.normalization_defect() < 1e-8
    gram = (grid.hermite_table * grid.weights) @ grid.hermite_table.T
    assert np.max(np.abs(gram - np.eye(16))) < 1e-8


def test_sign_probabilities_vacuum_quadrants():
    space = FockSpace.uniform(2, 5)
    state = vacuum_state(space)
    grid = QuadratureGrid.for_cutoff(5)
    for probs in (sign_probabilities(state, grid), sign_probabilities_exact(state)):
        for value in probs.as_dict().values():
            assert abs(value - 0.25) < 1e-10
        assert abs(probs.total - 1.0) < 1e-10


def test_sign_probabilities_even_parity_state():
    space = FockSpace.uniform(2, 5)
    state = basis_state(space, [1, 0])
    probs = sign_probabilities(state, QuadratureGrid.for_cutoff(5))
    assert abs(probs.pp - 0.25) < 1e-10
    exact = sign_probabilities_exact(state)
    assert abs(exact.pp - 0.25) < 1e-12


def test_tmss_same_sign_mass():
    space = FockSpace.uniform(2, 15)
    state = tmss(SqueezeParams(r=0.5, cutoff=15), space)
    exact = sign_probabilities_exact(state)
    # Infinite-cutoff value 1/2 + arcsin(tanh 2r)/pi; truncation shifts it
    # by ~2e-8 at this cutoff.
    assert abs(exact.same_sign - 0.7755829857) < 1e-7
    assert abs(exact.total - 1.0) < 1e-10
    assert abs(exact.pm - exact.mp) < 1e-12

    default_grid = sign_probabilities(state, QuadratureGrid.for_cutoff(15))
    fine_grid = sign_probabilities(state, QuadratureGrid.for_cutoff(15, 128))
    coarse_err = abs(default_grid.same_sign - exact.same_sign)
    fine_err = abs(fine_grid.same_sign - exact.same_sign)
    assert coarse_err < 8e-3
    assert fine_err < coarse_err


def test_same_sign_probability_batched_matches_exact():
    space = FockSpace.uniform(2, 5)
    rng = np.random.default_rng(11)
    batch = rng.normal(size=(6, space.dimension)) + 1j * rng.normal(
        size=(6, space.dimension)
    )
    damp = 0.15 ** np.array(
        [sum(space.occupation_of(i)) for i in range(space.dimension)]
    )
    batch *= damp
    batch /= np.linalg.norm(batch, axis=-1, keepdims=True)
    probs = same_sign_probability(space, batch)
    from homodyne_sse.fock import StateVector

    for row, value in zip(batch, probs):
        single = sign_probabilities_exact(StateVector(row, space))
        assert abs(single.same_sign - value) < 1e-10


def test_sign_probabilities_rejects_saturated_state():
    space = FockSpace.uniform(2, 3)
    state = basis_state(space, [3, 0])
    with pytest.raises(GridCoverageError):
        sign_probabilities_exact(state)
    small = QuadratureGrid.for_cutoff(2)
    healthy = basis_state(space, [1, 0])
    with pytest.raises(GridCoverageError):
        sign_probabilities(healthy, small)


def test_half_range_overlaps_basic_entries():
    overlaps = half_range_overlaps(3)
    assert overlaps[0, 0] == 0.5
    # int_0^inf phi_0 phi_1 = 1/sqrt(2 pi)
    assert abs(overlaps[0, 1] - 1.0 / np.sqrt(2.0 * np.pi)) < 1e-14
    assert overlaps[0, 2] == 0.0
    assert np.max(np.abs(overlaps - overlaps.T)) < 1e-14


def test_ising_energy_and_ground_states():
    coupling = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert ising_energy((1, 1), coupling) == -2.0
    assert ising_energy((1, -1), coupling) == 2.0
    assert ising_energy((1, 1), np.zeros((2, 2))) == 0.0
    energy, winners = ground_states(coupling)
    assert energy == -2.0
    assert set(winners) == {(1, 1), (-1, -1)}
    with pytest.raises(ValueError):
        ising_energy((1, 2), coupling)
    with pytest.raises(ValueError):
        ising_energy((1, 1), np.array([[1.0, 0.0], [0.0, 1.0]]))


def test_binned_output_moments_values():
    vac = binned_output_moments(0.0, 2.0)
    assert vac.variance == pytest.approx(2.0, abs=1e-12)
    assert vac.covariance_x == 0.0
    assert vac.inference_product == pytest.approx(vac.vacuum_product, abs=1e-12)

    strong = binned_output_moments(0.5, 2.0)
    assert strong.gain == pytest.approx(1.2642411176571153, abs=1e-12)
    assert strong.variance == pytest.approx(2.8680088218182247, abs=1e-12)
    assert strong.covariance_x == pytest.approx(1.878330653128813, abs=1e-12)
    assert strong.covariance_p == pytest.approx(-1.878330653128813, abs=1e-12)
    assert strong.inference_product == pytest.approx(2.6825301344205403, abs=1e-10)
    assert strong.inference_product < strong.vacuum_product


def test_damped_self_moment_limits():
    assert damped_quadrature_self_moment(0.5, 0.0) == pytest.approx(COSH_1)
    assert damped_quadrature_self_moment(0.5, 50.0) == pytest.approx(1.0)
