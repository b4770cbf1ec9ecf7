import math

import numpy as np
import pytest

from homodyne_sse.fock import FockSpace, pair_expect
from homodyne_sse.states import (
    SqueezeParams,
    analytic_moments,
    tmss,
    tmss_truncation_deficit,
)


def test_tmss_zero_squeezing_is_vacuum():
    space = FockSpace.uniform(2, 5)
    state = tmss(SqueezeParams(r=0.0, cutoff=5), space)
    assert abs(state.amplitudes[space.index_of((0, 0))]) == pytest.approx(1.0)
    assert np.sum(np.abs(state.amplitudes) ** 2) == pytest.approx(1.0)


def test_tmss_amplitude_ratio():
    # consecutive diagonal amplitudes are in ratio tanh(r)
    space = FockSpace.uniform(2, 15)
    state = tmss(SqueezeParams(r=0.5, cutoff=15), space)
    a1 = state.amplitudes[space.index_of((1, 1))]
    a0 = state.amplitudes[space.index_of((0, 0))]
    assert (a1 / a0).real == pytest.approx(math.tanh(0.5), abs=1e-12)
    # off-diagonal entries vanish
    assert state.amplitudes[space.index_of((1, 0))] == 0.0


def test_tmss_truncation_deficit_small_at_default_cutoff():
    params = SqueezeParams(r=0.5, cutoff=15)
    deficit = tmss_truncation_deficit(params)
    # geometric tail computed term by term as an independent check
    t = math.tanh(0.5)
    direct = sum(t ** (2 * n) / math.cosh(0.5) ** 2 for n in range(16, 400))
    assert deficit == pytest.approx(direct, rel=1e-10)
    assert deficit < 1e-10
    # the renormalized state therefore carries the intended weights
    space = FockSpace.uniform(2, 15)
    state = tmss(params, space)
    assert state.norm() == pytest.approx(1.0, abs=1e-12)
    raw = sum(
        (t ** (2 * n)) / math.cosh(0.5) ** 2 for n in range(16)
    )
    assert raw == pytest.approx(1.0 - deficit, rel=1e-12)


def test_tmss_matches_analytic_moments_at_time_zero():
    space = FockSpace.uniform(2, 15)
    state = tmss(SqueezeParams(r=0.5, cutoff=15), space)
    ref = analytic_moments(0.5, 0.0)
    xx = pair_expect(state, [("x", 0), ("x", 1)]).real
    pp = pair_expect(state, [("p", 0), ("p", 1)]).real
    assert xx == pytest.approx(ref.xx, abs=1e-8)
    assert pp == pytest.approx(ref.pp, abs=1e-8)
    xx_self = pair_expect(state, [("x", 0), ("x", 0)]).real
    assert xx_self == pytest.approx(math.cosh(1.0), abs=1e-8)


def test_tmss_difference_variance():
    # <(x1 - x2)^2> = 2 e^{-2r}: squeezed below the vacuum value 2
    space = FockSpace.uniform(2, 15)
    r = 0.5
    state = tmss(SqueezeParams(r=r, cutoff=15), space)
    val = (
        pair_expect(state, [("x", 0), ("x", 0)])
        + pair_expect(state, [("x", 1), ("x", 1)])
        - 2.0 * pair_expect(state, [("x", 0), ("x", 1)])
    ).real
    assert val == pytest.approx(2.0 * math.exp(-2.0 * r), abs=1e-8)
    assert val < 2.0


def test_tmss_input_validation():
    space = FockSpace.uniform(2, 5)
    with pytest.raises(ValueError):
        tmss(SqueezeParams(r=0.5, cutoff=9), space)
    with pytest.raises(ValueError):
        tmss(SqueezeParams(r=0.5, cutoff=5), FockSpace.uniform(1, 5))
    with pytest.raises(ValueError):
        SqueezeParams(r=float("nan"), cutoff=5)
    with pytest.raises(ValueError):
        SqueezeParams(r=0.5, cutoff=0)


def test_analytic_moments_structure():
    r, tau = 0.5, 0.7
    rec = analytic_moments(r, tau)
    decay = math.exp(-tau)
    assert rec.xx == pytest.approx(decay * math.sinh(2 * r))
    assert rec.pp == pytest.approx(-rec.xx)
    assert rec.xx_self == pytest.approx(decay * math.cosh(2 * r))
    assert rec.pp_self == pytest.approx(rec.xx_self)
    zero = analytic_moments(0.0, 0.3)
    assert zero.xx == 0.0 and zero.pp == 0.0
