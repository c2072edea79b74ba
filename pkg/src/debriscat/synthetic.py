"""Synthetic populations and attributable pairs for tests, fixtures and demos."""
from __future__ import annotations

import math

import numpy as np

from .astro import R_EARTH, KeplerianElements, Station, station_position_velocity
from .observation import (Attributable, attributable_covariance, elevation_of, light_time_view,
                          topocentric_arrays)
from .population import PopulationObject


def random_elements(rng, hp_range=(1000.0, 2000.0), e_max=0.1, epoch=0.0, inc_range=(0.0, 180.0),
                    a_max=None) -> KeplerianElements:
    """Random elliptic elements with perigee altitude in ``hp_range`` (km)."""
    hp = rng.uniform(*hp_range)
    e = rng.uniform(0.0, e_max)
    a = (R_EARTH + hp) / (1.0 - e)
    if a_max is not None and a > a_max:
        a = a_max - 1e-3    # 1 m inside, so text round trips keep the class
        e = 1.0 - (R_EARTH + hp) / a
    ci = rng.uniform(math.cos(math.radians(inc_range[1])), math.cos(math.radians(inc_range[0])))
    return KeplerianElements(a, e, math.acos(ci), rng.uniform(0, 2 * math.pi), rng.uniform(0, 2 * math.pi),
                             rng.uniform(0, 2 * math.pi), epoch)


def random_population(n, seed, diameter_range=(0.08, 0.27), hp_range=(1300.0, 2000.0), e_max=0.05,
                      epoch=0.0, a_max=R_EARTH + 2000.0, prefix="OBJ"):
    """Population of ``n`` objects; diameters log-uniform in ``diameter_range`` (m)."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        el = random_elements(rng, hp_range, e_max, epoch, a_max=a_max)
        d = math.exp(rng.uniform(math.log(diameter_range[0]), math.log(diameter_range[1])))
        out.append(PopulationObject(f"{prefix}{k:04d}", el, round(d, 4)))
    return out


def make_attributable(obj, station: Station, t: float, sigma_arcsec: float = 0.4, rng=None,
                      exposure_s: float = 1.0) -> Attributable:
    """Attributable of ``obj`` seen from ``station`` at ``t`` (light-time corrected)."""
    x, q, qd, _ = light_time_view(obj, station, t)
    ra, dec, rad, decd, _, _ = topocentric_arrays(x[:3], x[3:], q, qd)
    cov = attributable_covariance(sigma_arcsec, float(dec), exposure_s)
    v = np.array([ra, dec, rad, decd], dtype=float)
    if rng is not None:
        v = v + rng.standard_normal(4) * np.sqrt(np.diag(cov))
        v[0] %= 2 * math.pi
    return Attributable(*map(float, v), epoch=t, station=station, covariance=cov)


def visible_epochs(obj, stations, start, stop, step_days=60.0 / 86400.0, min_elevation_deg=15.0):
    """(epoch, station) samples where the object is above the elevation mask (geometry only)."""
    ts = np.arange(start, stop, step_days)
    r = obj.state_at(ts)[:, :3]
    out = []
    for st in stations:
        q, _ = station_position_velocity(st, ts)
        el = elevation_of(r, q)
        out.extend((float(t), st) for t in ts[el >= math.radians(min_elevation_deg)])
    out.sort(key=lambda p: (p[0], p[1].name))
    return out


def random_pair(rng, stations, hp_range=(1000.0, 2000.0), e_max=0.1, dt_range=(0.3, 1.5),
                sigma_arcsec=0.4, noise=False, max_tries=50):
    """A visible attributable pair of one random orbit, with the truth object.

    The first epoch is drawn in day 0, the second ``dt`` later within ``dt_range``.
    """
    for _ in range(max_tries):
        obj = PopulationObject("PAIR", random_elements(rng, hp_range, e_max), 0.1)
        v1 = visible_epochs(obj, stations, 0.0, 1.0, 120.0 / 86400.0)
        if not v1:
            continue
        t1, st1 = v1[rng.integers(len(v1))]
        dt = rng.uniform(*dt_range)
        v2 = visible_epochs(obj, stations, t1 + dt, t1 + dt + 0.25, 60.0 / 86400.0)
        v2 = [p for p in v2 if p[0] - t1 <= dt_range[1]]
        if not v2:
            continue
        t2, st2 = v2[0]
        nr = rng if noise else None
        return (make_attributable(obj, st1, t1, sigma_arcsec, nr),
                make_attributable(obj, st2, t2, sigma_arcsec, nr), obj)
    raise RuntimeError("could not find a visible pair")
