"""Time, frames, constants and two-body element conversions.

Epochs are plain floats: days of a uniform (TT-like) scale counted from
J2000.0 (2000-01-01T12:00:00).  Distances are km, velocities km/s, angles
radians unless a name says otherwise.  The array routines broadcast over
leading dimensions so the linkage and least-squares code can evaluate many
states at once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from datetime import datetime, timedelta

import numpy as np

MU = 398600.4418            # km^3/s^2
R_EARTH = 6378.137          # km
J2 = 1.08263e-3
OMEGA_EARTH = 7.2921159e-5  # rad/s
AU_KM = 1.495978707e8
C_LIGHT = 299792.458        # km/s
DAY = 86400.0
TWO_PI = 2.0 * math.pi
ARCSEC = math.pi / (180.0 * 3600.0)

J2000 = datetime(2000, 1, 1, 12, 0, 0)


@dataclass(frozen=True)
class PhysicalConstants:
    mu: float = MU
    r_earth: float = R_EARTH
    j2: float = J2
    omega_earth: float = OMEGA_EARTH
    au: float = AU_KM
    c: float = C_LIGHT


CONSTANTS = PhysicalConstants()


# --------------------------------------------------------------------------
# epochs

def epoch_from_iso(text: str) -> float:
    """Parse an ISO-8601 timestamp (no zone, uniform scale) to days from J2000."""
    dt = datetime.fromisoformat(text.strip().rstrip("Z"))
    delta = dt - J2000
    return (delta.days * DAY + delta.seconds + delta.microseconds * 1e-6) / DAY


def epoch_to_iso(t: float) -> str:
    micro = round(t * DAY * 1e6)
    return (J2000 + timedelta(microseconds=micro)).isoformat(timespec="microseconds")


def earth_rotation_angle(t):
    """Earth rotation angle (rad) at epoch ``t`` (days from J2000)."""
    t = np.asarray(t, dtype=float)
    frac = np.mod(0.7790572732640 + 0.00273781191135448 * t + np.mod(t, 1.0), 1.0)
    return TWO_PI * frac


# --------------------------------------------------------------------------
# containers

@dataclass(frozen=True)
class CartesianState:
    r: np.ndarray
    v: np.ndarray
    epoch: float

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.r, self.v])

    @classmethod
    def from_vector(cls, x, epoch: float) -> "CartesianState":
        x = np.asarray(x, dtype=float)
        return cls(x[:3].copy(), x[3:6].copy(), epoch)


@dataclass(frozen=True)
class KeplerianElements:
    a: float
    e: float
    inc: float
    raan: float
    argp: float
    mean_anomaly: float
    epoch: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.e, self.inc, self.raan, self.argp, self.mean_anomaly])

    @classmethod
    def from_array(cls, x, epoch: float = 0.0) -> "KeplerianElements":
        x = [float(v) for v in x]
        return cls(*x, epoch=epoch)

    @property
    def perigee_altitude(self) -> float:
        return self.a * (1.0 - self.e) - R_EARTH

    @property
    def apogee_altitude(self) -> float:
        return self.a * (1.0 + self.e) - R_EARTH

    @property
    def mean_motion(self) -> float:
        return math.sqrt(MU / self.a**3)

    def with_epoch(self, epoch: float) -> "KeplerianElements":
        return replace(self, epoch=epoch)


@dataclass(frozen=True)
class DelaunayElements:
    ell: float
    argp: float
    raan: float
    L: float
    G: float
    Z: float


def keplerian_to_delaunay(el: KeplerianElements, mu: float = MU) -> DelaunayElements:
    L = math.sqrt(mu * el.a)
    G = L * math.sqrt(1.0 - el.e**2)
    return DelaunayElements(el.mean_anomaly, el.argp, el.raan, L, G, G * math.cos(el.inc))


def delaunay_to_keplerian(d: DelaunayElements, epoch: float = 0.0, mu: float = MU) -> KeplerianElements:
    a = d.L**2 / mu
    e = math.sqrt(max(0.0, 1.0 - (d.G / d.L) ** 2))
    inc = math.acos(max(-1.0, min(1.0, d.Z / d.G)))
    return KeplerianElements(a, e, inc, d.raan, d.argp, d.ell, epoch)


# --------------------------------------------------------------------------
# Kepler equation and conversions

def solve_kepler(M, e, tol: float = 1e-14, max_iter: int = 50):
    """Eccentric anomaly from mean anomaly for 0 <= e < 1.

    Newton iterations from a starting guess that is safe for high
    eccentricity, with a bisection-style fallback clamp so the iterate never
    leaves the bracket [M - e, M + e] (after reduction to (-pi, pi]).
    Works elementwise on arrays.
    """
    M = np.asarray(M, dtype=float)
    e = np.asarray(e, dtype=float)
    scalar = M.ndim == 0 and e.ndim == 0
    Mr = np.mod(M + math.pi, TWO_PI) - math.pi
    turns = M - Mr
    E = np.where(e < 0.8, Mr, math.pi * np.sign(Mr))
    E = np.where(Mr == 0.0, 0.0, E)
    lo = Mr - e
    hi = Mr + e
    for _ in range(max_iter):
        f = E - e * np.sin(E) - Mr
        fp = 1.0 - e * np.cos(E)
        step = f / fp
        E_new = E - step
        E_new = np.clip(E_new, lo, hi)
        done = np.all(np.abs(E_new - E) <= tol * np.maximum(1.0, np.abs(E_new)))
        E = E_new
        if done:
            break
    E = E + turns
    return float(E) if scalar else E


def _cross(a, b):
    """Cross product over the last axis; cheaper than np.cross on small arrays."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a1 * b2 - a2 * b1
    out[..., 1] = a2 * b0 - a0 * b2
    out[..., 2] = a0 * b1 - a1 * b0
    return out


def _rotation_columns(inc, raan, argp):
    cO, sO = np.cos(raan), np.sin(raan)
    co, so = np.cos(argp), np.sin(argp)
    ci, si = np.cos(inc), np.sin(inc)
    P = np.stack([cO * co - sO * so * ci, sO * co + cO * so * ci, so * si], axis=-1)
    Q = np.stack([-cO * so - sO * co * ci, -sO * so + cO * co * ci, co * si], axis=-1)
    return P, Q


def kep_to_cart(elements, mu: float = MU):
    """Vectorised elements (..., 6) -> Cartesian state (..., 6)."""
    x = np.asarray(elements, dtype=float)
    a, e, inc, raan, argp, M = (x[..., k] for k in range(6))
    E = solve_kepler(M, e)
    cE, sE = np.cos(E), np.sin(E)
    b = np.sqrt(1.0 - e * e)
    xp = a * (cE - e)
    yp = a * b * sE
    rdot = np.sqrt(mu / a) / (1.0 - e * cE)
    vxp = -rdot * sE
    vyp = rdot * b * cE
    P, Q = _rotation_columns(inc, raan, argp)
    r = xp[..., None] * P + yp[..., None] * Q
    v = vxp[..., None] * P + vyp[..., None] * Q
    return np.concatenate([r, v], axis=-1)


def cart_to_kep(state, mu: float = MU):
    """Vectorised Cartesian state (..., 6) -> elements (..., 6).

    Angles are returned in [0, 2pi).  For e below 1e-11 the perigee is put at the
    node (argp = 0); for I == 0 the node is put on the x axis.  Callers that
    need a hard failure on hyperbolic or degenerate input use
    :func:`state_to_elements`.
    """
    s = np.asarray(state, dtype=float)
    r = s[..., :3]
    v = s[..., 3:6]
    rn = np.linalg.norm(r, axis=-1)
    h = _cross(r, v)
    hn = np.linalg.norm(h, axis=-1)
    energy = 0.5 * np.sum(v * v, axis=-1) - mu / rn
    a = -mu / (2.0 * energy)
    evec = _cross(v, h) / mu - r / rn[..., None]
    e = np.linalg.norm(evec, axis=-1)
    inc = np.arccos(np.clip(h[..., 2] / hn, -1.0, 1.0))
    node = np.stack([-h[..., 1], h[..., 0], np.zeros_like(hn)], axis=-1)
    nn = np.hypot(node[..., 0], node[..., 1])
    small_n = nn < 1e-12 * hn
    node_unit = np.where(small_n[..., None], np.array([1.0, 0.0, 0.0]),
                         node / np.where(small_n, 1.0, nn)[..., None])
    raan = np.arctan2(node_unit[..., 1], node_unit[..., 0])
    # in-plane frame: p along node line, q = hhat x p
    hhat = h / hn[..., None]
    qv = _cross(hhat, node_unit)
    ex = np.sum(evec * node_unit, axis=-1)
    ey = np.sum(evec * qv, axis=-1)
    argp = np.where(e < 1e-11, 0.0, np.arctan2(ey, ex))
    # true anomaly measured from perigee
    rx = np.sum(r * node_unit, axis=-1)
    ry = np.sum(r * qv, axis=-1)
    u = np.arctan2(ry, rx)
    nu = u - argp
    # eccentric anomaly from true anomaly
    b = np.sqrt(np.clip(1.0 - e * e, 0.0, None))
    E = np.arctan2(b * np.sin(nu), e + np.cos(nu))
    M = E - e * np.sin(E)
    return np.stack([a, e, inc, np.mod(raan, TWO_PI), np.mod(argp, TWO_PI), np.mod(M, TWO_PI)], axis=-1)


def elements_to_state(el: KeplerianElements, mu: float = MU) -> CartesianState:
    if not (el.a > 0 and 0.0 <= el.e < 1.0):
        raise ValueError(f"elements must be elliptic (a={el.a}, e={el.e})")
    x = kep_to_cart(el.as_array(), mu)
    return CartesianState(x[:3], x[3:], el.epoch)


def state_to_elements(state: CartesianState, mu: float = MU, e_tol: float = 1e-6) -> KeplerianElements:
    r = np.asarray(state.r, dtype=float)
    v = np.asarray(state.v, dtype=float)
    h = np.linalg.norm(np.cross(r, v))
    if h < 1e-9 * np.linalg.norm(r) * np.linalg.norm(v):
        raise ValueError("rectilinear state: angular momentum vanishes")
    x = cart_to_kep(np.concatenate([r, v]), mu)
    if not (x[0] > 0 and x[1] < 1.0 - e_tol):
        raise ValueError(f"state is not bound-elliptic (a={x[0]:.3f} km, e={x[1]:.6f})")
    return KeplerianElements.from_array(x, state.epoch)


def wrap_pi(x):
    """Wrap angles to (-pi, pi]."""
    y = np.mod(np.asarray(x, dtype=float) + math.pi, TWO_PI) - math.pi
    y = np.where(y == -math.pi, math.pi, y)
    return float(y) if np.ndim(y) == 0 else y


# --------------------------------------------------------------------------
# Sun

def sun_direction(t):
    """Unit geocentric Sun vector in the equatorial frame.

    Low-precision analytic series (about 0.01 deg over 1950-2050).
    Accepts scalar or array epochs; returns shape (..., 3).
    """
    n = np.asarray(t, dtype=float)
    L = np.radians(np.mod(280.460 + 0.9856474 * n, 360.0))
    g = np.radians(np.mod(357.528 + 0.9856003 * n, 360.0))
    lam = L + np.radians(1.915) * np.sin(g) + np.radians(0.020) * np.sin(2.0 * g)
    eps = np.radians(23.439 - 4.0e-7 * n)
    cl = np.cos(lam)
    sl = np.sin(lam)
    return np.stack([cl, np.cos(eps) * sl, np.sin(eps) * sl], axis=-1)


# --------------------------------------------------------------------------
# stations

@dataclass(frozen=True)
class Station:
    name: str
    lat: float            # rad, geodetic (treated as geocentric on a sphere)
    lon: float            # rad, east positive
    height: float = 0.0   # m
    cloud_probability: float = 0.0
    telescopes: int = 3

    def __post_init__(self):
        if not -math.pi / 2 <= self.lat <= math.pi / 2:
            raise ValueError(f"{self.name}: latitude out of range")
        if not 0.0 <= self.cloud_probability <= 1.0:
            raise ValueError(f"{self.name}: cloud probability must be in [0, 1]")


def station_position_velocity(station: Station, t):
    """Inertial position and velocity of a station, arrays of shape (..., 3)."""
    theta = earth_rotation_angle(t) + station.lon
    rho = R_EARTH + station.height / 1000.0
    cl = math.cos(station.lat)
    x = rho * cl * np.cos(theta)
    y = rho * cl * np.sin(theta)
    z = np.full_like(x, rho * math.sin(station.lat))
    r = np.stack([x, y, z], axis=-1)
    v = np.stack([-OMEGA_EARTH * y, OMEGA_EARTH * x, np.zeros_like(x)], axis=-1)
    return r, v


def geodetic_to_inertial(station: Station, t: float) -> CartesianState:
    r, v = station_position_velocity(station, t)
    return CartesianState(np.asarray(r), np.asarray(v), t)
