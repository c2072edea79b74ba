import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from debriscat.astro import (R_EARTH, TWO_PI, CartesianState, KeplerianElements, Station, cart_to_kep,
                             delaunay_to_keplerian, elements_to_state, epoch_from_iso, epoch_to_iso,
                             kep_to_cart, keplerian_to_delaunay, solve_kepler, state_to_elements,
                             station_position_velocity, sun_direction, wrap_pi)

elements = st.builds(
    lambda a, e, i, O, w, M: np.array([a, e, i, O, w, M]),
    st.floats(6800.0, 42000.0), st.floats(0.0, 0.9), st.floats(0.01, math.pi - 0.01),
    st.floats(0.0, TWO_PI - 1e-9), st.floats(0.0, TWO_PI - 1e-9), st.floats(0.0, TWO_PI - 1e-9))


@given(st.floats(-50.0, 50.0), st.floats(0.0, 0.99))
def test_kepler_equation_residual(M, e):
    E = solve_kepler(M, e)
    assert abs(E - e * math.sin(E) - M) < 1e-11


def test_kepler_vectorised_matches_scalar():
    M = np.linspace(-7, 7, 31)
    e = np.linspace(0, 0.95, 31)
    E = solve_kepler(M, e)
    assert np.allclose(E, [solve_kepler(m, x) for m, x in zip(M, e)], atol=1e-14)


@settings(max_examples=200)
@given(elements)
def test_elements_round_trip(x):
    y = cart_to_kep(kep_to_cart(x))
    assert y[0] == pytest.approx(x[0], rel=1e-10)
    assert y[1] == pytest.approx(x[1], abs=1e-10)
    assert y[2] == pytest.approx(x[2], abs=1e-9)
    # angles compared through the Cartesian state, since argp and node degenerate at small e or I
    assert np.allclose(kep_to_cart(y), kep_to_cart(x), rtol=0, atol=1e-7)


def test_circular_equatorial_conventions():
    x = kep_to_cart([7000.0, 0.0, 0.0, 0.0, 0.0, 1.0])
    y = cart_to_kep(x)
    assert y[1] < 1e-12 and y[2] < 1e-12
    assert y[3] == 0.0 and y[4] == pytest.approx(0.0, abs=1e-12)
    assert y[5] == pytest.approx(1.0, abs=1e-12)


def test_state_to_elements_rejects_hyperbolic():
    st_ = CartesianState(np.array([7000.0, 0, 0]), np.array([0, 12.0, 0]), 0.0)
    with pytest.raises(ValueError, match="not bound"):
        state_to_elements(st_)


def test_state_to_elements_rejects_rectilinear():
    st_ = CartesianState(np.array([7000.0, 0, 0]), np.array([1.0, 0, 0]), 0.0)
    with pytest.raises(ValueError, match="rectilinear"):
        state_to_elements(st_)


def test_elements_to_state_rejects_parabolic():
    with pytest.raises(ValueError):
        elements_to_state(KeplerianElements(7000.0, 1.0, 0.5, 0, 0, 0, 0.0))


def test_delaunay_round_trip():
    el = KeplerianElements(7778.0, 0.05, 1.0, 2.0, 3.0, 4.0, 1.5)
    back = delaunay_to_keplerian(keplerian_to_delaunay(el), el.epoch)
    assert np.allclose(back.as_array(), el.as_array(), atol=1e-10)


@given(st.floats(-1e5, 1e5))
def test_wrap_pi_range(x):
    w = wrap_pi(x)
    assert -math.pi <= w < math.pi or math.isclose(w, math.pi)
    assert math.isclose(math.cos(w), math.cos(x), abs_tol=1e-6)


@pytest.mark.parametrize("text", ["2000-01-01T12:00:00.000000", "2005-06-30T23:59:59.999000"])
def test_iso_round_trip(text):
    assert epoch_to_iso(epoch_from_iso(text)) == text


def test_iso_epoch_origin():
    assert epoch_from_iso("2000-01-01T12:00:00") == 0.0
    assert epoch_from_iso("2000-01-02T12:00:00") == 1.0


def test_station_on_rotating_earth():
    s = Station("X", math.radians(40.0), math.radians(10.0), 1000.0)
    t = np.linspace(0.0, 1.0, 7)
    r, v = station_position_velocity(s, t)
    assert np.allclose(np.linalg.norm(r, axis=1), R_EARTH + 1.0)
    assert np.allclose(r[:, 2], (R_EARTH + 1.0) * math.sin(s.lat))
    assert np.allclose(np.sum(r * v, axis=1), 0.0, atol=1e-9)


def test_station_validation():
    with pytest.raises(ValueError):
        Station("bad", 2.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        Station("bad", 0.0, 0.0, 0.0, cloud_probability=1.5)


def test_sun_direction_unit_and_seasonal():
    u = np.asarray(sun_direction(0.0))
    assert np.linalg.norm(u) == pytest.approx(1.0, abs=1e-9)
    # near the June solstice the Sun is at about +23.4 deg declination
    dec = math.degrees(math.asin(np.asarray(sun_direction(172.0))[2]))
    assert dec == pytest.approx(23.4, abs=0.5)
