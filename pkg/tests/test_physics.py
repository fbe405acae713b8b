import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from rydberg_lz.physics import (
    MAGIC_ANGLE,
    GasDensity,
    PairPhysics,
    SweepSpec,
    default_channel_set,
    erlang_nn_cdf,
    erlang_nn_pdf,
    expected_transition,
    expected_transition_direct,
    np_count,
    p_lz_aggregate,
    p_lz_single,
    r0,
    r0_from_marker,
    single_channel_set,
    transition_argument,
    wigner_seitz_radius,
)
from rydberg_lz.numerics import k_complement


def test_channel_sum_is_isotropic():
    theta = np.linspace(0.0, math.pi, 200)
    cs = default_channel_set()
    assert len(cs) == 9
    np.testing.assert_allclose(cs.sum_f6(theta), 2.0 / 3.0, rtol=0, atol=1e-12)
    assert cs.isotropic_sum == pytest.approx(2.0 / 3.0)
    assert single_channel_set("0,0").isotropic_sum is None


def test_zero_zero_channel_vanishes_at_magic_angle():
    ch = single_channel_set("0,0").channels[0]
    assert float(ch.f_sixth(MAGIC_ANGLE)) == pytest.approx(0.0, abs=1e-30)
    sw = SweepSpec(1.0)
    assert p_lz_single(sw, 5.0, MAGIC_ANGLE, ch) == pytest.approx(0.0, abs=1e-15)


def test_marker_readings():
    assert r0_from_marker(13.5, "r0") == 13.5
    assert r0_from_marker(13.5) * (2.0 / 3.0) ** (1.0 / 3.0) == pytest.approx(13.5, rel=1e-15)
    with pytest.raises(ValueError):
        r0_from_marker(13.5, "diameter")


def test_r0_sixth_root_scaling():
    sw = SweepSpec(np.array([1.0, 64.0, 0.5]), r0_ref=10.0, f_prime_ref=1.0)
    np.testing.assert_allclose(r0(sw), [10.0, 5.0, 10.0 * 2 ** (1 / 6)], rtol=1e-14)


def test_sweep_validation():
    with pytest.raises(ValueError):
        SweepSpec(0.0)
    with pytest.raises(ValueError):
        SweepSpec(1.0, r0_ref=-1.0)


def test_p_single_at_soft_radius_is_one_minus_inverse_e():
    ch = single_channel_set("0,0").channels[0]
    sw = SweepSpec(1.0, r0_ref=10.0)
    f = float(ch.f_sixth(0.3)) ** (1 / 6)
    assert p_lz_single(sw, 10.0 * f, 0.3, ch) == pytest.approx(1.0 - math.exp(-1.0), rel=1e-14)


def test_p_aggregate_limits_and_errors():
    sw = SweepSpec(1.0)
    assert p_lz_aggregate(sw, 0.0, 0.2) == 1.0
    assert p_lz_aggregate(sw, 1e6, 0.2) == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(ValueError):
        p_lz_aggregate(sw, -1.0, 0.2)


@given(st.floats(0.1, 100.0), st.floats(0.1, 100.0), st.floats(0.0, math.pi), st.floats(0.3, 10.0))
@settings(max_examples=80, deadline=None)
def test_p_aggregate_decreases_with_distance(r1, r2, theta, fp):
    lo, hi = sorted((r1, r2))
    sw = SweepSpec(fp)
    p_lo, p_hi = p_lz_aggregate(sw, lo, theta), p_lz_aggregate(sw, hi, theta)
    assert 0.0 <= p_hi <= p_lo <= 1.0


@given(st.floats(0.3, 10.0), st.floats(0.3, 10.0))
@settings(max_examples=40, deadline=None)
def test_faster_sweep_means_fewer_transitions(f1, f2):
    lo, hi = sorted((f1, f2))
    ph = PairPhysics()
    assert ph.expected_transition(4e7, hi) <= ph.expected_transition(4e7, lo) + 1e-15


def test_wigner_seitz_radius_definition():
    a = wigner_seitz_radius(1e9)
    assert 4.0 * math.pi / 3.0 * a ** 3 * 1e9 * 1e-12 == pytest.approx(1.0, rel=1e-14)
    assert GasDensity(1e9).wigner_seitz_radius == a


def test_erlang_density_normalised_with_known_median():
    eta = 4e7
    total, _ = integrate.quad(lambda r: erlang_nn_pdf(eta, r), 0, 200, limit=200)
    assert total == pytest.approx(1.0, rel=1e-10)
    a = wigner_seitz_radius(eta)
    r_med = a * math.log(2.0) ** (1 / 3)
    assert erlang_nn_cdf(eta, r_med) == pytest.approx(0.5, rel=1e-14)
    with pytest.raises(ValueError):
        erlang_nn_pdf(0.0, 1.0)


def test_expected_transition_zero_density():
    assert expected_transition(0.0, SweepSpec(1.0)) == 0.0
    assert expected_transition_direct(0.0, SweepSpec(1.0)) == 0.0


def test_expected_transition_matches_scipy_double_integral():
    # Independent route: scipy dblquad over the Erlang density times P.
    eta, fp = 4e7, 2.0
    sw = SweepSpec(fp, r0_ref=r0_from_marker())
    e = eta * 1e-12

    def integrand(r, th):
        pdf = 4 * math.pi * e * r * r * math.exp(-(4 * math.pi / 3) * e * r ** 3)
        return 0.5 * math.sin(th) * pdf * -math.expm1(-(2 / 3) * (r0(sw) / r) ** 6) if r > 0 else 0.0

    ref, _ = integrate.dblquad(integrand, 0, math.pi, 0, 60, epsabs=1e-13, epsrel=1e-11)
    assert expected_transition(eta, sw) == pytest.approx(ref, rel=1e-8)


def test_anisotropic_channel_matches_direct_quadrature():
    cs = single_channel_set("0,0")
    sw = SweepSpec(1.0, r0_ref=r0_from_marker())
    for eta in (1e7, 1e8):
        a = expected_transition(eta, sw, cs)
        b = expected_transition_direct(eta, sw, cs)
        assert a == pytest.approx(b, rel=1e-8)


def test_collapse_onto_transition_argument():
    sw = SweepSpec(np.array([0.6, 7.8]))
    x = transition_argument(np.array([1e7, 3e8]), sw)
    np.testing.assert_allclose(expected_transition(np.array([1e7, 3e8]), sw),
                               k_complement((2 / 3) * x), rtol=1e-14)


def test_np_count():
    sw = SweepSpec(1.0)
    p = expected_transition(4e7, sw)
    assert np_count(4e7, 2.4e-4, sw) == pytest.approx(0.5 * 4e7 * 2.4e-4 * p, rel=1e-14)
    with pytest.raises(ValueError):
        np_count(4e7, 0.0, sw)
