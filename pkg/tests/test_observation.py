import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from debriscat.astro import ARCSEC, R_EARTH, KeplerianElements, Station, station_position_velocity
from debriscat.observation import (Attributable, InstrumentModel, PhotometryModel, absolute_magnitude,
                                   apparent_magnitude, astrometric_sigma, attributable_covariance,
                                   calibrate_zero_point, elevation_of, ground_distance, in_earth_shadow,
                                   instrument_from_config, instrument_to_config, load_instrument,
                                   night_is_clear, phase_angle, reconstruct_state, slant_range, snr_from_signal,
                                   snr_trail, synthesize_observation, topocentric_arrays, trail_length)
from debriscat.population import PopulationObject

INST = InstrumentModel()


def test_single_pixel_trail_equals_star_formula():
    b = snr_from_signal(5000.0, 80.0, 1)
    assert b.snr_trail == b.snr_star == b.snr_pixel


@pytest.mark.parametrize("T", [10, 50, 200, 1000])
def test_trail_to_pixel_ratio_noise_dominated(T):
    b = snr_from_signal(1.0, 1e6, T)
    assert b.snr_trail / b.snr_pixel == pytest.approx(math.sqrt(T), rel=0.01)


def test_trail_length_at_reference_rate():
    assert trail_length(300.0, INST) == 200
    assert trail_length(0.0, INST) == 1


def test_zero_point_calibration_reproduces_threshold():
    zp = calibrate_zero_point(INST)
    inst = replace(INST, zero_point_e_per_s=zp)
    H = absolute_magnitude(0.08)
    h = apparent_magnitude(H, 2000.0, math.radians(60.0))
    assert snr_trail(h, 700.0, inst).snr_trail == pytest.approx(6.0, rel=1e-9)
    assert zp == pytest.approx(INST.zero_point_e_per_s, rel=1e-6)


def test_absolute_magnitude_convention():
    assert absolute_magnitude(1.0) == pytest.approx(33.0)
    assert absolute_magnitude(0.1) == pytest.approx(38.0)
    with pytest.raises(ValueError):
        absolute_magnitude(0.0)


def test_brighter_when_closer_and_at_low_phase():
    H = 38.0
    assert apparent_magnitude(H, 1000.0, 0.5) < apparent_magnitude(H, 2000.0, 0.5)
    assert apparent_magnitude(H, 1000.0, 0.2) < apparent_magnitude(H, 1000.0, 1.0)


def test_astrometric_sigma_floor_and_degradation():
    strong = snr_from_signal(1e7, 50.0, 1)
    s, degraded = astrometric_sigma(strong, INST)
    assert s == INST.astrometric_floor_arcsec and not degraded
    weak = snr_from_signal(100.0, 53.1, 100)
    s, degraded = astrometric_sigma(weak, INST)
    assert s > INST.degraded_sigma_arcsec and degraded


def test_attributable_covariance_scaling():
    c = attributable_covariance(1.0, 0.0, 1.0)
    assert c[0, 0] == pytest.approx(ARCSEC ** 2)
    assert c[2, 2] == pytest.approx(2 * ARCSEC ** 2)
    assert attributable_covariance(1.0, 1.0, 1.0)[0, 0] > c[0, 0]


@given(st.floats(0.0, 2 * math.pi - 1e-6), st.floats(-1.4, 1.4), st.floats(-1e-3, 1e-3), st.floats(-1e-3, 1e-3),
       st.floats(500.0, 40000.0), st.floats(-5.0, 5.0))
def test_topocentric_reconstruct_round_trip(ra, dec, rad, decd, rho, rhod):
    q, qd = np.array([4000.0, 3000.0, 3500.0]), np.array([-0.2, 0.3, 0.0])
    r, v = reconstruct_state(ra, dec, rad, decd, rho, rhod, q, qd)
    out = topocentric_arrays(r, v, q, qd)
    assert np.allclose(out[2:], [rad, decd, rho, rhod], rtol=1e-8, atol=1e-12)
    assert math.isclose(math.cos(out[0] - ra), 1.0, abs_tol=1e-12) and out[1] == pytest.approx(dec)


def test_slant_range_limits():
    assert slant_range(1000.0, math.pi / 2) == pytest.approx(1000.0)
    assert slant_range(1000.0, 0.0) == pytest.approx(math.sqrt(2 * R_EARTH * 1000.0 + 1000.0 ** 2))
    assert ground_distance(1000.0, math.pi / 2) == pytest.approx(0.0, abs=1e-9)


def test_shadow_and_elevation_geometry():
    sun = np.array([1.0, 0.0, 0.0])
    assert in_earth_shadow(np.array([-7000.0, 0, 0]), sun)
    assert not in_earth_shadow(np.array([7000.0, 0, 0]), sun)
    assert not in_earth_shadow(np.array([-7000.0, 7000.0, 0]), sun)
    q = np.array([R_EARTH, 0, 0])
    assert elevation_of(np.array([R_EARTH + 1000.0, 0, 0]), q) == pytest.approx(math.pi / 2)
    # object between observer and Sun: fully backlit
    assert phase_angle(np.array([R_EARTH + 1000.0, 0, 0]), q, sun) == pytest.approx(math.pi)
    assert phase_angle(np.array([R_EARTH + 1000.0, 0, 0]), q, -sun) == pytest.approx(0.0, abs=1e-7)


def test_weather_is_deterministic_and_nightly():
    s = Station("S", 0.3, 0.0, 0.0, 0.5)
    a = [night_is_clear(s, t, 7) for t in np.arange(0, 40, 1.0)]
    assert a == [night_is_clear(s, t, 7) for t in np.arange(0, 40, 1.0)]
    assert night_is_clear(s, 3.1, 7) == night_is_clear(s, 3.3, 7)
    assert 0 < sum(a) < 40
    assert night_is_clear(replace(s, cloud_probability=0.0), 1.0, 7)
    assert not night_is_clear(replace(s, cloud_probability=1.0), 1.0, 7)


def test_instrument_config_round_trip(tmp_path):
    inst = replace(INST, exposure_s=2.0, photometry=PhotometryModel(0.2, 0.03))
    back = instrument_from_config(instrument_to_config(inst))
    assert back == inst
    p = tmp_path / "i.ini"
    with p.open("w") as fh:
        instrument_to_config(inst).write(fh)
    assert load_instrument(p) == inst
    assert load_instrument() == INST


def test_instrument_rejects_negative_fields():
    with pytest.raises(ValueError):
        InstrumentModel(read_noise_e=-1.0)


def _overhead_object(station, t):
    """Object on a circular 1500 km orbit passing through the station zenith at t."""
    q, _ = station_position_velocity(station, t)
    up = q / np.linalg.norm(q)
    from debriscat.astro import cart_to_kep, MU
    r = up * (R_EARTH + 1500.0)
    v = np.cross([0, 0, 1.0], up)
    v = v / np.linalg.norm(v) * math.sqrt(MU / np.linalg.norm(r))
    el = cart_to_kep(np.concatenate([r, v]))
    return PopulationObject("OVH", KeplerianElements(*el, epoch=t), 0.2)


def test_synthesis_reasons_and_determinism():
    st_ = Station("S", 0.0, 0.0, 0.0, 0.0)
    # find a dark epoch for this station
    from debriscat.observation import station_dark
    t = next(t for t in np.arange(0, 1, 0.01) if station_dark(st_, t, -30.0))
    obj = _overhead_object(st_, t)
    d1 = synthesize_observation(obj, st_, t, "survey", 3)
    d2 = synthesize_observation(obj, st_, t, "survey", 3)
    assert d1.reason in ("detected", "shadow")
    if d1.detected:
        assert np.array_equal(d1.attributable.vector, d2.attributable.vector)
        assert d1.attributable.mode == "survey"
    day = next(t for t in np.arange(0, 1, 0.01) if not station_dark(st_, t, 0.0))
    assert synthesize_observation(_overhead_object(st_, day), st_, day, "survey", 3).reason == "daylight"
    with pytest.raises(ValueError):
        synthesize_observation(obj, st_, t, "stare", 3)


def test_attributable_observer_cached():
    s = Station("S", 0.2, 0.1, 0.0)
    a = Attributable(1.0, 0.2, 0.0, 0.0, 0.5, s, np.eye(4))
    assert a.observer() is a.observer()
    assert a.with_id(4).trail_id == 4
