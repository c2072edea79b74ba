"""Two-body + J2 dynamics: secular (Delaunay averages) and numerical."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .astro import (DAY, J2, MU, R_EARTH, TWO_PI, CartesianState, KeplerianElements,
                    cart_to_kep, kep_to_cart)


class PolarOrbitError(ValueError):
    """Node-rate ratios are undefined when cos I = 0."""


class PropagationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SecularRates:
    ell_dot: float    # rad/s
    argp_dot: float   # rad/s
    raan_dot: float   # rad/s
    n: float          # rad/s
    cos_inc: float

    @property
    def c_omega(self) -> float:
        if abs(self.cos_inc) < 1e-12:
            raise PolarOrbitError("C_omega undefined for a polar orbit")
        return self.argp_dot / self.raan_dot

    @property
    def c_ell(self) -> float:
        if abs(self.cos_inc) < 1e-12:
            raise PolarOrbitError("C_ell undefined for a polar orbit")
        return (self.ell_dot - self.n) / self.raan_dot


def secular_rate_arrays(a, e, inc, j2: float = J2, mu: float = MU, r_earth: float = R_EARTH):
    """Vectorised (ell_dot, argp_dot, raan_dot, n) in rad/s."""
    a = np.asarray(a, dtype=float)
    e = np.asarray(e, dtype=float)
    inc = np.asarray(inc, dtype=float)
    n = np.sqrt(mu / a**3)
    eta2 = 1.0 - e * e
    k = n * (r_earth / a) ** 2 * j2
    ci = np.cos(inc)
    si2 = np.sin(inc) ** 2
    ell_dot = n - 0.75 * k * (1.0 - 3.0 * ci * ci) / eta2**1.5
    argp_dot = 0.75 * k * (4.0 - 5.0 * si2) / eta2**2
    raan_dot = -1.5 * k * ci / eta2**2
    return ell_dot, argp_dot, raan_dot, n


def compatibility_coefficients(e, inc):
    """C_omega and C_ell, the ratios of the argp and (ell - n) rates to the node rate.

    Independent of a and J2.  Returns nan where cos I == 0.
    """
    ci = np.cos(inc)
    with np.errstate(divide="ignore", invalid="ignore"):
        c_om = -(4.0 - 5.0 * np.sin(inc) ** 2) / (2.0 * ci)
        c_ell = (1.0 - 3.0 * ci * ci) * np.sqrt(1.0 - np.asarray(e) ** 2) / (2.0 * ci)
    return c_om, c_ell


def secular_rates(el: KeplerianElements, j2: float = J2) -> SecularRates:
    if not (0.0 <= el.e < 1.0) or el.a <= R_EARTH:
        raise ValueError(f"secular rates need e < 1 and a > R_earth (a={el.a}, e={el.e})")
    ld, wd, Od, n = secular_rate_arrays(el.a, el.e, el.inc, j2)
    return SecularRates(float(ld), float(wd), float(Od), float(n), math.cos(el.inc))


def secular_propagate_array(elements, dt, j2: float = J2):
    """Advance element arrays (..., 6) by ``dt`` seconds (broadcast)."""
    x = np.asarray(elements, dtype=float)
    dt = np.asarray(dt, dtype=float)
    ld, wd, Od, _ = secular_rate_arrays(x[..., 0], x[..., 1], x[..., 2], j2)
    shape = np.broadcast_shapes(x.shape[:-1], dt.shape)
    out = np.empty(shape + (6,))
    out[..., 0] = x[..., 0]
    out[..., 1] = x[..., 1]
    out[..., 2] = x[..., 2]
    out[..., 3] = np.mod(x[..., 3] + Od * dt, TWO_PI)
    out[..., 4] = np.mod(x[..., 4] + wd * dt, TWO_PI)
    out[..., 5] = np.mod(x[..., 5] + ld * dt, TWO_PI)
    return out


def propagate_secular(el: KeplerianElements, dt: float, j2: float = J2) -> KeplerianElements:
    """Secular J2 propagation by ``dt`` seconds; a, e, I are untouched."""
    x = secular_propagate_array(el.as_array(), dt, j2)
    return KeplerianElements(el.a, el.e, el.inc, float(x[3]), float(x[4]), float(x[5]),
                             el.epoch + dt / DAY)


def secular_states(elements, t0, t, j2: float = J2):
    """Cartesian states at epochs ``t`` (days) of mean elements given at ``t0``."""
    dt = (np.asarray(t, dtype=float) - np.asarray(t0, dtype=float)) * DAY
    return kep_to_cart(secular_propagate_array(elements, dt, j2))


# --------------------------------------------------------------------------
# numerical model

def j2_acceleration(r, j2: float = J2, mu: float = MU, r_earth: float = R_EARTH):
    """Oblateness acceleration for positions (..., 3) in km/s^2."""
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    r2 = x * x + y * y + z * z
    rn = np.sqrt(r2)
    f = -1.5 * j2 * mu * r_earth**2 / (r2 * r2 * rn)
    zz = 5.0 * z * z / r2
    return np.stack([f * x * (1.0 - zz), f * y * (1.0 - zz), f * z * (3.0 - zz)], axis=-1)


def _rhs_factory(k: int, j2: float, extra: Optional[Callable]):
    def rhs(t, y):
        s = y.reshape(k, 6)
        r = s[:, :3]
        rn = np.linalg.norm(r, axis=1)
        acc = -MU * r / rn[:, None] ** 3
        if j2:
            acc = acc + j2_acceleration(r, j2)
        if extra is not None:
            acc = acc + extra(t, s)
        return np.concatenate([s[:, 3:], acc], axis=1).ravel()
    return rhs


def _hit_surface(t, y):
    s = y.reshape(-1, 6)
    return float(np.min(np.linalg.norm(s[:, :3], axis=1)) - R_EARTH)


_hit_surface.terminal = True


def propagate_states(states, dt_seconds, j2: float = J2, rtol: float = 1e-11,
                     extra_acceleration: Optional[Callable] = None):
    """Integrate ``k`` states (k, 6) jointly; returns states at each requested offset.

    ``dt_seconds`` is a 1-D array of offsets (any order, any sign).  Output has
    shape (k, len(dt), 6).  ``extra_acceleration(t, states)`` is the hook for
    additional perturbations.
    """
    y0 = np.atleast_2d(np.asarray(states, dtype=float))
    k = y0.shape[0]
    dts = np.atleast_1d(np.asarray(dt_seconds, dtype=float))
    out = np.empty((k, dts.size, 6))
    rhs = _rhs_factory(k, j2, extra_acceleration)
    for sign in (1.0, -1.0):
        sel = np.nonzero(dts * sign > 0)[0]
        if sel.size == 0:
            continue
        order = sel[np.argsort(np.abs(dts[sel]))]
        t_end = float(dts[order[-1]])
        sol = solve_ivp(rhs, (0.0, t_end), y0.ravel(), method="DOP853", rtol=rtol,
                        atol=rtol * 1e-1, t_eval=dts[order], events=_hit_surface)
        if sol.status == 1:
            raise PropagationError(f"trajectory reached the Earth surface at t={sol.t_events[0][0]:.1f} s")
        if sol.status != 0:
            raise PropagationError(f"integration failed: {sol.message}")
        out[:, order, :] = sol.y.reshape(k, 6, -1).transpose(0, 2, 1)
    zero = np.nonzero(dts == 0.0)[0]
    if zero.size:
        out[:, zero, :] = y0[:, None, :]
    return out


def propagate_numerical(state: CartesianState, dt: float, j2: float = J2,
                        extra_acceleration: Optional[Callable] = None) -> CartesianState:
    if np.linalg.norm(state.r) <= R_EARTH:
        raise PropagationError("initial position inside the Earth")
    x = propagate_states(state.vector[None, :], [dt], j2,
                         extra_acceleration=extra_acceleration)[0, 0]
    return CartesianState(x[:3], x[3:], state.epoch + dt / DAY)


def mean_drift_rates(state: CartesianState, days: float, samples: int = 2001, j2: float = J2):
    """Least-squares slopes (rad/s) of node, perigee and mean anomaly along a numerical arc.

    Angles are unwrapped before fitting; the perigee and mean anomaly are
    combined with the node through the argument of latitude so small-e
    orbits give stable slopes.
    """
    t = np.linspace(0.0, days * DAY, samples)
    traj = propagate_states(state.vector[None, :], t[1:], j2)[0]
    traj = np.vstack([state.vector[None, :], traj])
    el = cart_to_kep(traj)
    raan = np.unwrap(el[:, 3])
    argp = np.unwrap(el[:, 4])
    lat = np.unwrap(el[:, 4] + el[:, 5])
    ell = np.unwrap(el[:, 5])
    fit = lambda y: np.polyfit(t, y, 1)[0]
    return {"raan": fit(raan), "argp": fit(argp), "ell": fit(ell), "argp+ell": fit(lat)}
