import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from homodyne_sse.fock import (
    FockSpace,
    NormalizationError,
    PhaseVector,
    StateVector,
    annihilate,
    apply_operator_product,
    basis_state,
    batch_vdot,
    create,
    lower_amps,
    pair_expect,
    quadrature_expect,
    raise_amps,
    tail_population,
    vacuum_state,
)
from homodyne_sse.states import SqueezeParams, tmss


def random_state(space, seed, damp=0.3):
    """Normalized random state with geometrically damped occupations."""
    rng = np.random.default_rng(seed)
    amps = rng.normal(size=space.dimension) + 1j * rng.normal(size=space.dimension)
    for i in range(space.dimension):
        occ = space.occupation_of(i)
        amps[i] *= damp ** sum(occ)
    return StateVector(amps, space).normalized()


def test_dimension_and_shape():
    space = FockSpace(2, (3, 4))
    assert space.shape == (4, 5)
    assert space.dimension == 20
    assert FockSpace.uniform(2, 15).dimension == 256


def test_index_round_trip():
    space = FockSpace(3, (2, 3, 1))
    seen = set()
    for i in range(space.dimension):
        occ = space.occupation_of(i)
        assert space.index_of(occ) == i
        seen.add(occ)
    assert len(seen) == space.dimension


@given(st.integers(0, 3), st.integers(0, 2), st.integers(0, 4))
def test_index_bijection_property(n0, n1, n2):
    space = FockSpace(3, (3, 2, 4))
    idx = space.index_of((n0, n1, n2))
    assert 0 <= idx < space.dimension
    assert space.occupation_of(idx) == (n0, n1, n2)


def test_space_validation():
    with pytest.raises(ValueError):
        FockSpace(0, ())
    with pytest.raises(ValueError):
        FockSpace(2, (3,))
    with pytest.raises(ValueError):
        FockSpace(1, (0,))
    space = FockSpace.uniform(2, 3)
    with pytest.raises(ValueError):
        space.index_of((4, 0))
    with pytest.raises(ValueError):
        space.occupation_of(space.dimension)


def test_annihilate_number_state():
    space = FockSpace.uniform(1, 5)
    one = basis_state(space, (1,))
    out = annihilate(one, 0)
    # a|1> = |0>
    np.testing.assert_allclose(out.amplitudes[space.index_of((0,))], 1.0)
    assert out.norm() == pytest.approx(1.0)
    # a|0> = 0
    assert annihilate(vacuum_state(space), 0).norm() == 0.0


def test_create_number_state():
    space = FockSpace.uniform(1, 5)
    one = basis_state(space, (1,))
    out = create(one, 0)
    # adag|1> = sqrt(2)|2>
    np.testing.assert_allclose(
        out.amplitudes[space.index_of((2,))], math.sqrt(2.0)
    )


def test_create_at_cutoff_drops_amplitude():
    space = FockSpace.uniform(1, 5)
    top = basis_state(space, (5,))
    out = create(top, 0)
    assert out.norm() == 0.0
    # dropped probability equals the input top-level population
    assert top.tail_population(0) == pytest.approx(1.0)


def test_mode_index_errors():
    space = FockSpace.uniform(2, 3)
    state = vacuum_state(space)
    with pytest.raises(ValueError):
        annihilate(state, 2)
    with pytest.raises(ValueError):
        create(state, -1)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_commutator_property(seed):
    # <a adag> - <adag a> = <psi|psi> when the top level is unoccupied.
    # The truncated identity picks up an error of (cutoff + 1) times the
    # tail population, so the tail has to sit well below the tolerance.
    space = FockSpace.uniform(2, 6)
    state = random_state(space, seed, damp=0.02)
    amps = state.amplitudes
    for k in range(2):
        assert tail_population(space, amps, k) < 1e-12
        low = lower_amps(space, amps, k)
        up = raise_amps(space, amps, k)
        val = batch_vdot(up, up) - batch_vdot(low, low)
        assert abs(val - 1.0) < 1e-10


def test_quadrature_expect_values():
    space = FockSpace.uniform(1, 6)
    # coherent-ish superposition (|0> + |1>)/sqrt(2): <x> = 1, <p> = 0
    amps = np.zeros(space.dimension, dtype=complex)
    amps[space.index_of((0,))] = 1.0
    amps[space.index_of((1,))] = 1.0
    state = StateVector(amps, space).normalized()
    assert quadrature_expect(state, 0, 0.0) == pytest.approx(1.0, abs=1e-12)
    assert quadrature_expect(state, 0, math.pi / 2) == pytest.approx(0.0, abs=1e-12)
    # (|0> + i|1>)/sqrt(2): <x> = 0, <p> = 1
    amps2 = np.zeros(space.dimension, dtype=complex)
    amps2[space.index_of((0,))] = 1.0
    amps2[space.index_of((1,))] = 1j
    state2 = StateVector(amps2, space).normalized()
    assert quadrature_expect(state2, 0, 0.0) == pytest.approx(0.0, abs=1e-12)
    assert quadrature_expect(state2, 0, math.pi / 2) == pytest.approx(1.0, abs=1e-12)


def test_quadrature_expect_rejects_unnormalized():
    space = FockSpace.uniform(1, 3)
    state = StateVector(2.0 * vacuum_state(space).amplitudes, space)
    with pytest.raises(NormalizationError):
        quadrature_expect(state, 0, 0.0)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 2.0 * math.pi))
@settings(max_examples=25, deadline=None)
def test_quadrature_expect_is_real_and_rotates(seed, phase):
    space = FockSpace.uniform(2, 5)
    state = random_state(space, seed)
    val = quadrature_expect(state, 0, phase)
    # same value from the generic product route: x_phi = a e^{-i phi} + h.c.
    low = lower_amps(space, state.amplitudes, 0)
    up = raise_amps(space, state.amplitudes, 0)
    ref = batch_vdot(
        state.amplitudes, np.exp(-1j * phase) * low + np.exp(1j * phase) * up
    )
    assert abs(ref.imag) < 1e-10
    assert val == pytest.approx(ref.real, abs=1e-10)


def test_pair_expect_vacuum_moments():
    space = FockSpace.uniform(2, 6)
    vac = vacuum_state(space)
    assert pair_expect(vac, [("x", 0), ("x", 0)]) == pytest.approx(1.0)
    assert pair_expect(vac, [("p", 1), ("p", 1)]) == pytest.approx(1.0)
    assert pair_expect(vac, [("x", 0), ("x", 1)]) == pytest.approx(0.0)
    assert pair_expect(vac, [("n", 0)]) == pytest.approx(0.0)


def test_pair_expect_number_operator():
    space = FockSpace.uniform(1, 6)
    two = basis_state(space, (2,))
    assert pair_expect(two, [("n", 0)]) == pytest.approx(2.0)
    assert pair_expect(two, [("x", 0), ("x", 0)]) == pytest.approx(5.0)  # 2n + 1


def test_pair_expect_tmss_cross_correlation():
    # <x1 x2> on the two-mode squeezed state equals sinh(2r)
    space = FockSpace.uniform(2, 15)
    state = tmss(SqueezeParams(r=0.5, cutoff=15), space)
    xx = pair_expect(state, [("x", 0), ("x", 1)])
    assert abs(xx.imag) < 1e-12
    assert xx.real == pytest.approx(math.sinh(1.0), abs=1e-8)
    pp = pair_expect(state, [("p", 0), ("p", 1)])
    assert pp.real == pytest.approx(-math.sinh(1.0), abs=1e-8)


def test_pair_expect_rejects_bad_tokens():
    space = FockSpace.uniform(1, 3)
    vac = vacuum_state(space)
    with pytest.raises(ValueError):
        pair_expect(vac, [("bogus", 0)])
    with pytest.raises(ValueError):
        pair_expect(vac, [("x", 5)])


def test_apply_operator_product_order():
    # tokens are read in operator order: [a, adag] means a(adag(psi))
    space = FockSpace.uniform(1, 4)
    vac = vacuum_state(space)
    out = apply_operator_product(space, vac.amplitudes, [("a", 0), ("adag", 0)])
    np.testing.assert_allclose(out[space.index_of((0,))], 1.0)
    out2 = apply_operator_product(space, vac.amplitudes, [("adag", 0), ("a", 0)])
    assert np.linalg.norm(out2) == 0.0


def test_batched_kernels_match_loop():
    space = FockSpace.uniform(2, 4)
    rng = np.random.default_rng(7)
    batch = rng.normal(size=(5, space.dimension)) + 1j * rng.normal(
        size=(5, space.dimension)
    )
    low = lower_amps(space, batch, 1)
    for i in range(5):
        np.testing.assert_allclose(low[i], lower_amps(space, batch[i], 1))
    tails = tail_population(space, batch, 0)
    for i in range(5):
        assert tails[i] == pytest.approx(
            float(tail_population(space, batch[i], 0))
        )


def test_phase_vector_canonical():
    pv = PhaseVector.of(0.0, -math.pi / 2)
    canon = pv.canonical()
    assert canon.angles[0] == pytest.approx(0.0)
    assert canon.angles[1] == pytest.approx(3 * math.pi / 2)
    assert len(pv) == 2
    full_turn = PhaseVector.of(2 * math.pi).canonical()
    assert full_turn.angles[0] == pytest.approx(0.0, abs=1e-12)


def test_state_vector_validation():
    space = FockSpace.uniform(2, 3)
    with pytest.raises(ValueError):
        StateVector(np.zeros(5, dtype=complex), space)
    with pytest.raises(ValueError):
        StateVector(np.zeros((2, space.dimension), dtype=complex), space)
    with pytest.raises(ValueError):
        StateVector(np.zeros(space.dimension, dtype=complex), space).normalized()
