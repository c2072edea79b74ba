import math

import numpy as np
import pytest

from debriscat.astro import DAY, MU, KeplerianElements, elements_to_state, kep_to_cart
from debriscat.propagation import (PolarOrbitError, PropagationError, compatibility_coefficients,
                                   mean_drift_rates, propagate_numerical, propagate_secular, propagate_states,
                                   secular_rates, secular_states)


def test_node_rate_anchor():
    el = KeplerianElements(7778.0, 0.0, math.radians(60.0), 0, 0, 0, 0.0)
    assert math.degrees(secular_rates(el).raan_dot) * DAY == pytest.approx(-2.49, abs=0.01)


def test_node_rate_cos_i_scaling():
    rates = [secular_rates(KeplerianElements(7778.0, 0.0, math.radians(i), 0, 0, 0, 0.0)).raan_dot
             for i in (30.0, 60.0)]
    assert rates[0] / rates[1] == pytest.approx(math.cos(math.radians(30)) / math.cos(math.radians(60)))


def test_compatibility_coefficients_match_rates():
    el = KeplerianElements(8000.0, 0.07, 0.9, 0, 0, 0, 0.0)
    r = secular_rates(el)
    c_om, c_ell = compatibility_coefficients(el.e, el.inc)
    assert c_om == pytest.approx(r.c_omega, rel=1e-12)
    assert c_ell == pytest.approx(r.c_ell, rel=1e-12)


def test_polar_orbit_ratios_undefined():
    r = secular_rates(KeplerianElements(8000.0, 0.01, math.pi / 2, 0, 0, 0, 0.0))
    with pytest.raises(PolarOrbitError):
        r.c_omega
    assert np.isnan(compatibility_coefficients(0.0, math.pi / 2)[0]) or \
        abs(compatibility_coefficients(0.0, math.pi / 2)[0]) > 1e12


def test_secular_rates_reject_suborbital():
    with pytest.raises(ValueError):
        secular_rates(KeplerianElements(6000.0, 0.0, 1.0, 0, 0, 0, 0.0))


def test_secular_propagation_zero_and_composition():
    el = KeplerianElements(7500.0, 0.02, 1.2, 0.3, 0.4, 0.5, 0.0)
    same = propagate_secular(el, 0.0)
    assert np.allclose(same.as_array(), el.as_array())
    two = propagate_secular(propagate_secular(el, 3000.0), 5000.0)
    one = propagate_secular(el, 8000.0)
    assert np.allclose(two.as_array(), one.as_array(), atol=1e-12)


def test_secular_states_shape():
    x = secular_states(np.array([7500.0, 0.02, 1.2, 0.3, 0.4, 0.5]), 0.0, np.linspace(0, 1, 5))
    assert x.shape == (5, 6)


def test_two_body_limit_is_periodic():
    el = KeplerianElements(7200.0, 0.01, 0.8, 0.1, 0.2, 0.3, 0.0)
    s = elements_to_state(el)
    period = 2 * math.pi * math.sqrt(el.a ** 3 / MU)
    back = propagate_numerical(s, period, j2=0.0)
    assert np.allclose(back.r, s.r, atol=1e-5)


def test_numerical_matches_kepler_without_j2():
    x0 = np.array([7200.0, 0.01, 0.8, 0.1, 0.2, 0.3])
    dt = np.array([-600.0, 0.0, 900.0, 2400.0])
    out = propagate_states(kep_to_cart(x0)[None, :], dt, j2=0.0)[0]
    n = math.sqrt(MU / 7200.0 ** 3)
    want = kep_to_cart(np.column_stack([np.tile(x0[:5], (4, 1)), x0[5] + n * dt]))
    assert np.allclose(out, want, atol=1e-6)


def test_numerical_reports_surface_impact():
    s = elements_to_state(KeplerianElements(6500.0, 0.1, 0.5, 0, 0, 0, 0.0))
    with pytest.raises(PropagationError):
        propagate_numerical(s, DAY)


@pytest.mark.slow
@pytest.mark.parametrize("a,e,inc", [(7778.0, 0.03, 30.0), (8100.0, 0.08, 100.0), (7900.0, 0.06, 145.0)])
def test_numerical_drifts_match_secular_rates(a, e, inc):
    el = KeplerianElements(a, e, math.radians(inc), 1.0, 2.0, 0.5, 0.0)
    got = mean_drift_rates(elements_to_state(el), 10.0)
    want = secular_rates(el)
    assert got["raan"] == pytest.approx(want.raan_dot, rel=0.01)
    assert got["argp"] == pytest.approx(want.argp_dot, rel=0.01)
    assert got["ell"] == pytest.approx(want.ell_dot, rel=0.01)
