"""Linkage of two attributables through the two-body energy and angular momentum integrals.

The J2 form rotates the two angular momenta by half the node drift each way
and iterates on the node rate K.  Everything below is vectorised over a
batch of "jobs" (pair index, K, light-time-corrected interval) so that a
sweep over many pairs costs little more than a single call.

Solution strategy for one job: projecting the vector equation
``R c1 - R^T c2 = 0`` onto ``w = D1' x D2'`` eliminates both range rates and
leaves a conic that is quadratic in rho2 for each rho1.  Along the two conic
branches the range rates follow linearly, so the energy difference becomes
a function of rho1 alone; its sign changes on a log grid are refined with
the Illinois method.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .astro import (C_LIGHT, DAY, J2, MU, R_EARTH, TWO_PI, CartesianState, KeplerianElements,
                    cart_to_kep)
from .observation import Attributable, unit_vectors
from .propagation import compatibility_coefficients, secular_rate_arrays

log = logging.getLogger(__name__)

RHO_MIN_KM = 10.0
RHO_MAX_KM = 50000.0
GRID_POINTS = 600
CHI_MAX = 5.0
K_TOL = 1e-12           # rad/s
MAX_ITER = 30


# --------------------------------------------------------------------------
# per-attributable decomposition

@dataclass(frozen=True)
class AngularMomentumDecomposition:
    """c(rho, rho_dot) = D rho_dot + E rho^2 + F rho + G and the matching energy."""
    D: np.ndarray
    E: np.ndarray
    F: np.ndarray
    G: np.ndarray
    q: np.ndarray
    qdot: np.ndarray
    rho_hat: np.ndarray
    rho_hat_dot: np.ndarray

    def angular_momentum(self, rho, rho_dot):
        return self.D * rho_dot + self.E * rho**2 + self.F * rho + self.G

    def energy(self, rho, rho_dot, mu: float = MU):
        r = self.q + rho * self.rho_hat
        v = self.qdot + rho_dot * self.rho_hat + rho * self.rho_hat_dot
        return 0.5 * float(v @ v) - mu / float(np.linalg.norm(r))


def _direction_and_rate(att_vec):
    """rho_hat and its time derivative from (..., 4) attributable vectors."""
    u, u_a, u_d = unit_vectors(att_vec[..., 0], att_vec[..., 1])
    ud = att_vec[..., 2, None] * u_a + att_vec[..., 3, None] * u_d
    return u, ud


def integrals_coefficients(A: Attributable) -> AngularMomentumDecomposition:
    q, qd = A.observer()
    u, ud = _direction_and_rate(A.vector)
    return AngularMomentumDecomposition(np.cross(q, u), np.cross(u, ud),
                                        np.cross(q, ud) + np.cross(u, qd), np.cross(q, qd),
                                        q, qd, u, ud)


class _Side:
    """Arrays describing one attributable per row, with the integrals' coefficients."""
    FIELDS = ("t", "att", "cov", "q", "qd", "u", "ud", "D", "E", "F", "G", "k")

    def __init__(self, t, att, cov, q, qd, _derived=None):
        self.t, self.att, self.cov, self.q, self.qd = t, att, cov, q, qd
        if _derived is not None:
            self.u, self.ud, self.D, self.E, self.F, self.G, self.k = _derived
            return
        u, ud = _direction_and_rate(att)
        self.u, self.ud = u, ud
        self.D = np.cross(q, u)
        self.E = np.cross(u, ud)
        self.F = np.cross(q, ud) + np.cross(u, qd)
        self.G = np.cross(q, qd)
        dot = lambda x, y: np.sum(x * y, axis=-1)
        # energy(rho, rd) = 0.5 (k0 + rd^2 + k1 rho^2 + 2 rd k2 + 2 rho k3) - mu / sqrt(k4 + rho^2 + 2 rho k5)
        self.k = np.stack([dot(qd, qd), dot(ud, ud), dot(qd, u), dot(qd, ud), dot(q, q), dot(q, u)], axis=-1)

    @classmethod
    def from_attributables(cls, atts):
        n = len(atts)
        q = np.empty((n, 3))
        qd = np.empty((n, 3))
        for k, a in enumerate(atts):
            q[k], qd[k] = a.observer()
        return cls(np.array([a.epoch for a in atts], dtype=float),
                   np.array([a.vector for a in atts]).reshape(n, 4),
                   np.array([a.covariance for a in atts]).reshape(n, 4, 4), q, qd)

    def take(self, idx):
        g = lambda name: getattr(self, name)[idx]
        return _Side(g("t"), g("att"), g("cov"), g("q"), g("qd"),
                     tuple(g(n) for n in ("u", "ud", "D", "E", "F", "G", "k")))


def _energy(k, rho, rd, mu=MU):
    return 0.5 * (k[..., 0] + rd * rd + k[..., 1] * rho * rho + 2.0 * rd * k[..., 2] + 2.0 * rho * k[..., 3]) \
        - mu / np.sqrt(k[..., 4] + rho * rho + 2.0 * rho * k[..., 5])


def _rotz(v, ang):
    c, s = np.cos(ang), np.sin(ang)
    return np.stack([c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1], v[..., 2]], axis=-1)


# --------------------------------------------------------------------------
# the conic parametrisation

@dataclass
class _Conic:
    cw: np.ndarray      # (M, 6) quadratic coefficients against unit w
    c1: np.ndarray      # (M, 6) rho_dot1 coefficients
    c2: np.ndarray      # (M, 6) rho_dot2 coefficients
    k1: np.ndarray      # (M, 6) energy coefficients
    k2: np.ndarray
    w2: np.ndarray      # |w|^2, for degeneracy checks

    def take(self, idx):
        return _Conic(self.cw[idx], self.c1[idx], self.c2[idx], self.k1[idx], self.k2[idx], self.w2[idx])


def _conic(s1: _Side, s2: _Side, K, dtbar) -> _Conic:
    th = 0.5 * np.asarray(K) * np.asarray(dtbar)
    D1, E1, F1, G1 = (_rotz(v, th) for v in (s1.D, s1.E, s1.F, s1.G))
    D2, E2, F2, G2 = (_rotz(v, -th) for v in (s2.D, s2.E, s2.F, s2.G))
    w = np.cross(D1, D2)
    w2 = np.sum(w * w, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        wn = w / np.sqrt(w2)[..., None]
        u1 = np.cross(D2, w) / w2[..., None]
        u2 = np.cross(D1, w) / w2[..., None]
    V = np.stack([E1, F1, G1, E2, F2, G2], axis=-2)
    dots = lambda x: np.einsum("...kj,...j->...k", V, x)
    return _Conic(dots(wn), dots(u1), dots(u2), s1.k, s2.k, w2)


def _branch_eval(t, br, sw, cn: _Conic):
    """Evaluate a conic branch at parameter t; broadcasts t (M, ...) against the conic rows.

    ``sw == 0`` parametrises by rho1 (solving the quadratic for rho2), ``sw == 1``
    by rho2.  Returns (rho1, rho2, rd1, rd2, f, valid, slope) where slope is
    d(other)/d(parameter) along the conic.
    """
    ex = (slice(None),) + (None,) * (np.ndim(t) - 1)
    cw = [cn.cw[:, k][ex] for k in range(6)]
    sw = np.asarray(sw)
    br = np.asarray(br)
    if sw.ndim:
        sw = sw[ex]
    if br.ndim:
        br = br[ex]
    s = sw == 1
    # quadratic A o^2 + B o + C = 0 in the non-parameter range o
    A = np.where(s, cw[0], cw[3])
    B = np.where(s, cw[1], cw[4])
    C = np.where(s, cw[2] - (cw[3] * t * t + cw[4] * t + cw[5]),
                 cw[5] - (cw[0] * t * t + cw[1] * t + cw[2]))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        disc = B * B - 4.0 * A * C
        sq = np.sqrt(np.maximum(disc, 0.0))
        qv = -0.5 * (B + np.where(B >= 0, sq, -sq))
        plus = np.where(B >= 0, C / qv, qv / A)
        minus = np.where(B >= 0, qv / A, C / qv)
        o = np.where(br > 0, plus, minus)
        rho1 = np.where(s, o, t)
        rho2 = np.where(s, t, o)
        basis = (-rho1 * rho1, -rho1, -1.0, rho2 * rho2, rho2, 1.0)
        rd1 = sum(cn.c1[:, k][ex] * basis[k] for k in range(6))
        rd2 = sum(cn.c2[:, k][ex] * basis[k] for k in range(6))
        f = _energy(cn.k1[ex], rho1, rd1) - _energy(cn.k2[ex], rho2, rd2)
        slope = np.where(s, (2 * cw[3] * t + cw[4]) / (2 * cw[0] * o + cw[1]),
                         (2 * cw[0] * t + cw[1]) / (2 * cw[3] * o + cw[4]))
    valid = (disc >= 0) & (o > 0) & np.isfinite(o) & np.isfinite(f)
    return rho1, rho2, rd1, rd2, f, valid, slope


def _other_branch(rho1, rho2, sw, cn: _Conic):
    """Branch label of the same point in the opposite parametrisation."""
    cw = cn.cw
    return np.where(sw == 1, np.sign(2 * cw[:, 3] * rho2 + cw[:, 4]), np.sign(2 * cw[:, 0] * rho1 + cw[:, 1]))


def _sign_changes(f, ok):
    s = np.sign(f)
    cross = ok[:, :-1] & ok[:, 1:] & (s[:, :-1] * s[:, 1:] <= 0) & ~((s[:, :-1] == 0) & (s[:, 1:] == 0))
    cross[:, 1:] &= ~(cross[:, :-1] & (s[:, 1:-1] == 0))
    return cross


def _near_extrema(f, ok):
    """Interior grid points where f has an extremum pointing towards zero (possible close root pair)."""
    df1 = f[:, 1:-1] - f[:, :-2]
    df2 = f[:, 2:] - f[:, 1:-1]
    okm = ok[:, :-2] & ok[:, 1:-1] & ok[:, 2:]
    mid = f[:, 1:-1]
    toward = ((mid > 0) & (df1 < 0) & (df2 > 0)) | ((mid < 0) & (df1 > 0) & (df2 < 0))
    return okm & toward


ZOOM_POINTS = 33
ZOOM_LEVELS = 4


def _zoom(cn: _Conic, rows, br, sw, xa, xb):
    """Resample extremum cells finely.

    Returns the brackets found (row, br, sw, xlo, xhi, flo, fhi) and the
    near misses (row, br, sw, x) whose extremum never crossed zero.
    """
    found = [[] for _ in range(7)]
    u = np.linspace(0.0, 1.0, ZOOM_POINTS)
    miss = None
    for level in range(ZOOM_LEVELS):
        if rows.size == 0:
            break
        xs = xa[:, None] + (xb - xa)[:, None] * u[None, :]
        f, ok = _branch_eval(np.exp(xs), br, sw, cn.take(rows))[4:6]
        cross = _sign_changes(f, ok)
        r, c = np.nonzero(cross)
        for lst, val in zip(found, (rows[r], br[r], sw[r], xs[r, c], xs[r, c + 1], f[r, c], f[r, c + 1])):
            lst.append(val)
        none = ~np.any(cross, axis=1)
        ext = _near_extrema(f, ok) & none[:, None]
        r, c = np.nonzero(ext)
        if r.size == 0:
            rows = rows[:0]
            break
        fa = np.abs(f[r, c + 1])
        order = np.lexsort((fa, r))
        first = np.ones(order.size, dtype=bool)
        first[1:] = r[order][1:] != r[order][:-1]
        r, c = r[order][first], c[order][first]
        rows, br, sw = rows[r], br[r], sw[r]
        xa, xb = xs[r, c], xs[r, c + 2]
    if rows.size:
        miss = (rows, br, sw, 0.5 * (xa + xb))
    else:
        miss = tuple(np.empty(0, dtype=t) for t in (int, float, int, float))
    if not found[0]:
        return tuple(np.empty(0) for _ in range(7)), miss
    return tuple(np.concatenate(v) for v in found), miss


def _scan(cn: _Conic, grid):
    """Sign-change brackets of the energy difference along both branches of both parametrisations.

    Extrema of the energy difference that point towards zero are zoomed so
    that close root pairs (common near the true solution) are not missed;
    extrema that never cross are returned as near misses, which the joint
    (parameter, K) iteration can still drive onto a solution.
    """
    M = cn.cw.shape[0]
    x = np.log(grid)
    t = np.broadcast_to(grid, (M, grid.size))
    out = [[] for _ in range(7)]
    zr, zb, zs, za, zx = [], [], [], [], []
    for sw in (0, 1):
        for br in (1.0, -1.0):
            _, _, _, _, f, ok, _ = _branch_eval(t, br, sw, cn)
            cross = _sign_changes(f, ok)
            r, c = np.nonzero(cross)
            for lst, val in zip(out, (r, np.full(r.size, br), np.full(r.size, sw), x[c], x[c + 1],
                                      f[r, c], f[r, c + 1])):
                lst.append(val)
            r, c = np.nonzero(_near_extrema(f, ok))
            zr.append(r)
            zb.append(np.full(r.size, br))
            zs.append(np.full(r.size, sw))
            za.append(x[c])
            zx.append(x[c + 2])
    zr = np.concatenate(zr)
    miss = tuple(np.empty(0, dtype=t) for t in (int, float, int, float))
    if zr.size:
        extra, miss = _zoom(cn, zr, np.concatenate(zb), np.concatenate(zs).astype(int),
                            np.concatenate(za), np.concatenate(zx))
        for lst, val in zip(out, extra):
            lst.append(val)
    res = [np.concatenate(v) for v in out]
    res[0] = res[0].astype(int)
    res[2] = res[2].astype(int)
    return tuple(res), miss


def _illinois(cn: _Conic, br, sw, xlo, xhi, flo, fhi, max_iter: int = 100):
    """Vectorised Illinois refinement of bracketed roots in x = log parameter."""
    xlo, xhi, flo, fhi = (np.array(v, dtype=float) for v in (xlo, xhi, flo, fhi))
    alive = np.ones(xlo.size, dtype=bool)
    side = np.zeros(xlo.size, dtype=int)
    x = np.where(flo == 0, xlo, xhi)
    done = (flo == 0) | (fhi == 0)
    for _ in range(max_iter):
        i = np.nonzero(alive & ~done)[0]
        if i.size == 0:
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            xn = (xlo[i] * fhi[i] - xhi[i] * flo[i]) / (fhi[i] - flo[i])
        bad = ~np.isfinite(xn) | (xn <= np.minimum(xlo[i], xhi[i])) | (xn >= np.maximum(xlo[i], xhi[i]))
        xn = np.where(bad, 0.5 * (xlo[i] + xhi[i]), xn)
        fn, ok = _branch_eval(np.exp(xn), br[i], sw[i], cn.take(i))[4:6]
        alive[i[~ok]] = False
        x[i] = xn
        same_lo = np.sign(fn) == np.sign(flo[i])
        j = i[same_lo]
        xlo[j], flo[j] = xn[same_lo], fn[same_lo]
        fhi[j] = np.where(side[j] == -1, 0.5 * fhi[j], fhi[j])
        side[j] = -1
        k = i[~same_lo]
        xhi[k], fhi[k] = xn[~same_lo], fn[~same_lo]
        flo[k] = np.where(side[k] == 1, 0.5 * flo[k], flo[k])
        side[k] = 1
        done[i] = (fn == 0) | (np.abs(xhi[i] - xlo[i]) < 1e-14)
    return x, alive


# --------------------------------------------------------------------------
# states, elements and the compatibility residual

def _states(X, a1, a2, q1, qd1, q2, qd2):
    """Object states (r, v) at both epochs from unknowns X = (rho1, rd1, rho2, rd2)."""
    u1, ud1 = _direction_and_rate(a1)
    u2, ud2 = _direction_and_rate(a2)
    r1 = q1 + X[..., 0, None] * u1
    v1 = qd1 + X[..., 1, None] * u1 + X[..., 0, None] * ud1
    r2 = q2 + X[..., 2, None] * u2
    v2 = qd2 + X[..., 3, None] * u2 + X[..., 2, None] * ud2
    return np.concatenate([r1, v1], axis=-1), np.concatenate([r2, v2], axis=-1)


def _integrals_residual(s1, s2, K, dtbar, mu=MU):
    th = 0.5 * K * dtbar
    c1 = _rotz(np.cross(s1[..., :3], s1[..., 3:]), th)
    c2 = _rotz(np.cross(s2[..., :3], s2[..., 3:]), -th)
    e1 = 0.5 * np.sum(s1[..., 3:] ** 2, axis=-1) - mu / np.linalg.norm(s1[..., :3], axis=-1)
    e2 = 0.5 * np.sum(s2[..., 3:] ** 2, axis=-1) - mu / np.linalg.norm(s2[..., :3], axis=-1)
    return np.concatenate([c1 - c2, (e1 - e2)[..., None]], axis=-1)


def _drift_rates(el, K):
    """(argp rate, mean-anomaly rate) implied by node rate K for elements el (..., 6).

    Uses K*C_omega and n + K*C_ell; near polar orbits the coefficients blow up,
    so the secular rates of the elements themselves are used instead.
    """
    a, e, inc = el[..., 0], el[..., 1], el[..., 2]
    n = np.sqrt(MU / np.abs(a) ** 3)
    K = np.broadcast_to(K, a.shape)
    polar = np.abs(np.cos(inc)) < 1e-6
    c_om, c_ell = compatibility_coefficients(np.clip(e, 0, 0.999999), inc)
    with np.errstate(invalid="ignore"):
        wd = np.where(polar, 0.0, K * c_om)
        ld = np.where(polar, 0.0, n + K * c_ell)
    if np.any(polar & (K != 0)):
        lds, wds, _, _ = secular_rate_arrays(np.abs(a), np.clip(e, 0, 0.999999), inc)
        wd = np.where(polar & (K != 0), wds, wd)
        ld = np.where(polar, np.where(K != 0, lds, n), ld)
    return wd, ld


def _compat(el1, el2, K, dt12):
    """Compatibility residual (delta argp, delta mean anomaly), dt12 = tbar1 - tbar2 (s)."""
    wd, ld = _drift_rates(el1, K)
    d_w = el1[..., 4] - el2[..., 4] - wd * dt12
    d_l = el1[..., 5] - el2[..., 5] - ld * dt12
    return np.stack([d_w, d_l], axis=-1)


def _chi_revolutions(d, G, j):
    """Mahalanobis norm of residual d (k, n) under covariance G, minimised over
    whole revolutions added to component j (the mean anomaly count is ambiguous).

    Returns (chi, adjusted residual).
    """
    Gi = np.linalg.inv(G)
    e = np.zeros(d.shape[1])
    e[j] = TWO_PI
    a = np.einsum("i,kij,j->k", e, Gi, e)
    b = np.einsum("i,kij,kj->k", e, Gi, d)
    k0 = np.floor(-b / a)
    best = np.full(d.shape[0], np.inf)
    out = d.copy()
    for k in (k0, k0 + 1.0):
        k = np.where(np.isfinite(k), k, 0.0)
        dk = d + k[:, None] * e
        c2 = np.einsum("ki,kij,kj->k", dk, Gi, dk)
        better = c2 < best
        best = np.where(better, c2, best)
        out[better] = dk[better]
    return np.sqrt(np.maximum(best, 0.0)), out


def _wrap(x):
    return np.mod(x + math.pi, TWO_PI) - math.pi


# --------------------------------------------------------------------------
# candidates

@dataclass
class LinkageCandidate:
    rho1: float
    rho_dot1: float
    rho2: float
    rho_dot2: float
    state1: CartesianState          # at tbar1
    state2: CartesianState          # at tbar2
    elements1: KeplerianElements
    elements2: KeplerianElements
    K: float                        # rad/s
    chi: float
    covariance: np.ndarray          # Keplerian elements at tbar1
    state_covariance: np.ndarray    # Cartesian state at tbar1
    branch: int = 1
    converged: bool = True
    iterations: int = 0
    trail_ids: tuple = ()
    residual: np.ndarray = field(default_factory=lambda: np.zeros(2), repr=False)
    tangent: bool = False           # closest approach rather than an exact root

    @property
    def unknowns(self) -> np.ndarray:
        return np.array([self.rho1, self.rho_dot1, self.rho2, self.rho_dot2])


def circular_guess(side: _Side, grid=None):
    """Range of the circular orbit through each attributable, and its (a, I, node, K).

    The range rate is fixed by requiring zero radial velocity; the range is
    the first root of |v|^2 - mu/|r| on the grid.  Rows without a root get NaN.
    """
    grid = _default_grid() if grid is None else grid
    rho = grid[None, :]
    u, ud, q, qd = (x[:, None, :] for x in (side.u, side.ud, side.q, side.qd))
    r = q + rho[..., None] * u
    with np.errstate(divide="ignore", invalid="ignore"):
        rd = -(np.sum(qd * r, -1) + rho * np.sum(ud * r, -1)) / np.sum(u * r, -1)
    v = qd + rd[..., None] * u + rho[..., None] * ud
    rn = np.linalg.norm(r, axis=-1)
    g = np.sum(v * v, -1) - MU / rn
    s = np.sign(g)
    cross = (s[:, :-1] * s[:, 1:] <= 0) & np.isfinite(g[:, :-1]) & np.isfinite(g[:, 1:])
    n = side.t.size
    out = np.full((n, 5), np.nan)
    has = np.any(cross, axis=1)
    first = np.argmax(cross, axis=1)
    for k in np.nonzero(has)[0]:
        c = first[k]
        g0, g1 = g[k, c], g[k, c + 1]
        w = g0 / (g0 - g1) if g0 != g1 else 0.0
        i = c if w < 0.5 else c + 1
        rr = r[k, c] + w * (r[k, c + 1] - r[k, c])
        vv = v[k, c] + w * (v[k, c + 1] - v[k, c])
        h = np.cross(rr, vv)
        a = float(np.linalg.norm(rr))
        inc = math.acos(max(-1.0, min(1.0, h[2] / np.linalg.norm(h))))
        node = math.atan2(h[0], -h[1]) % TWO_PI
        _, _, Kc, _ = secular_rate_arrays(a, 0.0, inc)
        out[k] = [grid[i], a, inc, node, float(Kc)]
    return out


def _default_grid(n: int = GRID_POINTS):
    return np.geomspace(RHO_MIN_KM, RHO_MAX_KM, n)


class PairBatch:
    """Geometry for a set of attributable pairs, plus the batched solver."""

    def __init__(self, side1: _Side, side2: _Side, grid=None):
        self.s1, self.s2 = side1, side2
        self.grid = _default_grid() if grid is None else np.asarray(grid)
        self.n = side1.t.size

    @classmethod
    def from_pairs(cls, pairs, grid=None):
        a1 = [p[0] for p in pairs]
        a2 = [p[1] for p in pairs]
        return cls(_Side.from_attributables(a1), _Side.from_attributables(a2), grid)

    # -- root finding for jobs ------------------------------------------------
    def _unknowns(self, pidx, br, sw, x, K, dtbar):
        cn = _conic(self.s1.take(pidx), self.s2.take(pidx), K, dtbar)
        rho1, rho2, rd1, rd2, f, ok, slope = _branch_eval(np.exp(x), br, sw, cn)
        return np.stack([rho1, rd1, rho2, rd2], axis=-1), ok, slope, cn

    def _shared_elements(self, pidx, X):
        """(a, e, I, node rate, bound mask) from the state at tbar1, vectorised."""
        s1 = self.s1.take(pidx)
        u, ud = s1.u, s1.ud
        r = s1.q + X[:, 0, None] * u
        v = s1.qd + X[:, 1, None] * u + X[:, 0, None] * ud
        en = 0.5 * np.sum(v * v, -1) - MU / np.linalg.norm(r, axis=-1)
        h = np.cross(r, v)
        hn = np.linalg.norm(h, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            a = -MU / (2.0 * en)
            e = np.sqrt(np.clip(1.0 - hn * hn / (MU * a), 0.0, None))
            inc = np.arccos(np.clip(h[:, 2] / hn, -1.0, 1.0))
        bound = (en < 0) & (a * (1.0 - e) > R_EARTH) & (e < 1.0)
        Kn = np.full(a.shape, np.nan)
        if np.any(bound):
            _, _, Kb, _ = secular_rate_arrays(a[bound], e[bound], inc[bound])
            Kn[bound] = Kb
        return a, e, inc, Kn, bound

    def _dtbar(self, pidx, X):
        return (self.s2.t[pidx] - self.s1.t[pidx]) * DAY - (X[:, 2] - X[:, 0]) / C_LIGHT

    def _fg(self, p, br, sw, x, K, dtb):
        """Energy mismatch f and node-rate mismatch g = K(elements) - K at (x, K)."""
        X, ok, slope, cn = self._unknowns(p, br, sw, x, K, dtb)
        f = _energy(cn.k1, X[:, 0], X[:, 1]) - _energy(cn.k2, X[:, 2], X[:, 3])
        _, _, _, Kn, bound = self._shared_elements(p, X)
        ok = ok & bound & np.isfinite(f)
        return f, Kn - K, ok, X, slope, cn

    def solve(self, pair_idx=None, fixed_K: Optional[float] = None, seeds=None,
              max_iter: int = MAX_ITER, tol: float = K_TOL):
        """Roots for every pair, as a dict of arrays.

        With ``fixed_K`` set, the rotation uses that K (0 gives the pure
        two-body system) and only the light-time interval is iterated.
        Otherwise each root found at a seed K, and each near miss of the
        energy difference, is driven to the joint solution of the energy
        condition and K = node rate(elements) by a damped Newton iteration in
        (log parameter, K).  The plain fixed-point map in K can expand near
        conic turning points, and close root pairs may only exist once K is
        close to its final value.
        """
        pidx_all = np.arange(self.n) if pair_idx is None else np.asarray(pair_idx)
        if fixed_K is not None:
            jobs_p = pidx_all
            jobs_K = np.full(pidx_all.size, float(fixed_K))
        else:
            if seeds is None:
                seeds = self.seed_K(pidx_all)
            jobs_p = np.repeat(pidx_all, seeds.shape[1])
            jobs_K = seeds.ravel()
            keep = np.isfinite(jobs_K)
            jobs_p, jobs_K = jobs_p[keep], jobs_K[keep]
        jobs_dt = (self.s2.t[jobs_p] - self.s1.t[jobs_p]) * DAY
        cn = _conic(self.s1.take(jobs_p), self.s2.take(jobs_p), jobs_K, jobs_dt)
        (rows, br, sw, xlo, xhi, flo, fhi), miss = _scan(cn, self.grid)
        x = np.empty(0)
        if rows.size:
            x, ok = _illinois(cn.take(rows), br, sw, xlo, xhi, flo, fhi)
            rows, br, sw, x = rows[ok], br[ok], sw[ok], x[ok]
        n_real = rows.size
        # members of close root pairs: if the pair merges as K moves, a closest approach remains
        paired = np.zeros(n_real, dtype=bool)
        if n_real > 1:
            o = np.lexsort((x, sw, br, rows))
            same = (rows[o][1:] == rows[o][:-1]) & (br[o][1:] == br[o][:-1]) & (sw[o][1:] == sw[o][:-1])
            close = same & (np.abs(np.diff(x[o])) < 0.05)
            paired[o[1:][close]] = True
            paired[o[:-1][close]] = True
        if fixed_K is None and miss[0].size:
            rows = np.concatenate([rows, miss[0]])
            br = np.concatenate([br, miss[1]])
            sw = np.concatenate([sw, miss[2]]).astype(int)
            x = np.concatenate([x, miss[3]])
        sw = sw.astype(int)
        p, K, dtb = jobs_p[rows], jobs_K[rows].copy(), jobs_dt[rows].copy()
        m = p.size
        start = (br.copy(), sw.copy(), x.copy(), K.copy(), dtb.copy())
        iters = np.zeros(m, dtype=int)
        conv = np.zeros(m, dtype=bool)
        alive = np.ones(m, dtype=bool)
        hx = 1e-7
        for it in range(max_iter):
            i = np.nonzero(alive & ~conv)[0]
            if i.size == 0:
                break
            f, g, ok, X, slope, cn = self._fg(p[i], br[i], sw[i], x[i], K[i], dtb[i])
            alive[i[~ok]] = False
            i, f, g, X, slope = i[ok], f[ok], g[ok], X[ok], slope[ok]
            cn = cn.take(np.nonzero(ok)[0])
            # move to the better-conditioned parametrisation before differentiating
            flip = np.abs(slope) > 1.0
            if np.any(flip):
                j = i[flip]
                br[j] = _other_branch(X[flip, 0], X[flip, 2], sw[j], cn.take(np.nonzero(flip)[0]))
                sw[j] = 1 - sw[j]
                x[j] = np.log(np.where(sw[j] == 1, X[flip, 2], X[flip, 0]))
            dtn = self._dtbar(p[i], X)
            light_ok = np.abs(dtn - dtb[i]) < 1e-9
            dtb[i] = dtn
            iters[i] += 1
            f, g, ok, X, _, _ = self._fg(p[i], br[i], sw[i], x[i], K[i], dtb[i])
            fx, gx, okx = self._fg(p[i], br[i], sw[i], x[i] + hx, K[i], dtb[i])[:3]
            dfx = (fx - f) / hx
            if fixed_K is not None:
                with np.errstate(divide="ignore", invalid="ignore"):
                    dx = -f / dfx
                dK = np.zeros_like(dx)
                g = np.zeros_like(f)
            else:
                hK = 1e-4 * np.abs(K[i]) + 1e-12
                fk, gk, okk = self._fg(p[i], br[i], sw[i], x[i], K[i] + hK, dtb[i])[:3]
                dfk, dgx, dgk = (fk - f) / hK, (gx - g) / hx, (gk - g) / hK
                det = dfx * dgk - dfk * dgx
                with np.errstate(divide="ignore", invalid="ignore"):
                    dx = (-f * dgk + g * dfk) / det
                    dK = (-g * dfx + f * dgx) / det
                okx = okx & okk
            good = ok & okx & np.isfinite(dx) & np.isfinite(dK)
            alive[i[~good]] = False
            i, dx, dK, f, g, light_ok = i[good], dx[good], dK[good], f[good], g[good], light_ok[good]
            small = (np.abs(dx) < 1e-11) & (np.abs(g) < tol)
            conv[i] = small & light_ok
            # damping
            sx = np.minimum(1.0, 0.05 / np.maximum(np.abs(dx), 1e-300))
            sk = np.minimum(1.0, (0.3 * np.abs(K[i]) + 1e-8) / np.maximum(np.abs(dK), 1e-300))
            sc = np.minimum(sx, sk)
            for _ in range(6):
                xn, Kn = x[i] + sc * dx, K[i] + sc * dK
                okn = self._fg(p[i], br[i], sw[i], xn, Kn, dtb[i])[2]
                if np.all(okn):
                    break
                sc = np.where(okn, sc, 0.5 * sc)
            x[i] = np.where(conv[i], x[i], xn)
            K[i] = np.where(conv[i], K[i], Kn)
        sel = np.nonzero(alive)[0]
        X, _, _, _ = self._unknowns(p[sel], br[sel], sw[sel], x[sel], K[sel], dtb[sel])
        if fixed_K is None:
            # near misses that never reached a root are not solutions
            f, g, ok = self._fg(p[sel], br[sel], sw[sel], x[sel], K[sel], dtb[sel])[:3]
            real = ok & (np.abs(f) < 1e-6) & (conv[sel] | (np.abs(g) < 1e3 * tol))
            sel, X = sel[real], X[real]
        if np.any(~conv[sel]):
            log.debug("link: %d branch(es) did not converge", int(np.sum(~conv[sel])))
        out = dict(pair=p[sel], branch=br[sel], X=X, K=K[sel], dtbar=dtb[sel],
                   converged=conv[sel], iterations=iters[sel], tangent=np.zeros(sel.size, dtype=bool),
                   fmiss=np.zeros(sel.size), sw=sw[sel], x=x[sel],
                   kfree=np.full(sel.size, fixed_K is None), fxx=np.zeros(sel.size))
        # near misses, and roots that vanished while K moved, are followed to a closest approach
        cand = np.concatenate([paired, np.ones(m - n_real, dtype=bool)])
        t = np.nonzero(cand & ((np.arange(m) >= n_real) | ~(alive & conv)))[0]
        if fixed_K is None and t.size:
            tan = self._tangent(p[t], *(v[t] for v in start))
            out = _merge_tangent(out, tan)
        return _dedupe(out)

    def _on_curve(self, p, br, sw, x, K, dtb, iters: int = 8, tol: float = K_TOL):
        """K satisfying K = node rate(elements) at fixed parameter x, with f and X there."""
        K = np.array(K, dtype=float)
        act = np.arange(p.size)
        for _ in range(iters):
            if act.size == 0:
                break
            a = act
            f, g, ok = self._fg(p[a], br[a], sw[a], x[a], K[a], dtb[a])[:3]
            hK = 1e-4 * np.abs(K[a]) + 1e-12
            g2 = self._fg(p[a], br[a], sw[a], x[a], K[a] + hK, dtb[a])[1]
            with np.errstate(divide="ignore", invalid="ignore"):
                dK = -g * hK / (g2 - g)
            lim = 0.3 * np.abs(K[a]) + 1e-8
            step = ok & np.isfinite(dK)
            K[a] = np.where(step, K[a] + np.clip(dK, -lim, lim), K[a])
            act = a[step & (np.abs(dK) > 0.01 * tol)]
        f, g, ok, X, slope, cn = self._fg(p, br, sw, x, K, dtb)
        return K, f, ok & (np.abs(g) < 1e3 * tol), X, slope, cn

    def _tangent(self, p, br, sw, x, K, dtb, fixed=False, max_iter: int = 20):
        """Closest approach of the two energy curves where they do not intersect.

        Observation noise can pull apart the pair of nearly coincident roots
        found close to the true solution.  The extremum F of the energy
        mismatch along the conic, with K kept equal to the node rate, then
        stands in for the root.  With ``fixed`` set, the light-time interval
        is held.  Returned ``fxx`` is the curvature of F in the log parameter.
        """
        br, sw, x, K, dtb = (np.array(v) for v in (br, sw, x, K, dtb))
        sw = sw.astype(int)
        m = p.size
        conv = np.zeros(m, dtype=bool)
        alive = np.ones(m, dtype=bool)
        iters = np.zeros(m, dtype=int)
        fxx = np.full(m, np.nan)
        eps = 1e-4
        for _ in range(max_iter):
            i = np.nonzero(alive & ~conv)[0]
            if i.size == 0:
                break
            Ki, f0, ok, X, slope, cn = self._on_curve(p[i], br[i], sw[i], x[i], K[i], dtb[i])
            K[i] = np.where(ok, Ki, K[i])
            flip = ok & (np.abs(slope) > 1.0)
            if np.any(flip):
                j = i[flip]
                br[j] = _other_branch(X[flip, 0], X[flip, 2], sw[j], cn.take(np.nonzero(flip)[0]))
                sw[j] = 1 - sw[j]
                x[j] = np.log(np.where(sw[j] == 1, X[flip, 2], X[flip, 0]))
            alive[i[~ok]] = False
            i, f0, X = i[ok], f0[ok], X[ok]
            light_ok = np.ones(i.size, dtype=bool)
            if not fixed:
                dtn = self._dtbar(p[i], X)
                light_ok = np.abs(dtn - dtb[i]) < 1e-9
                dtb[i] = dtn
            K0, f0, ok0 = self._on_curve(p[i], br[i], sw[i], x[i], K[i], dtb[i])[:3]
            fp, okp = self._on_curve(p[i], br[i], sw[i], x[i] + eps, K0, dtb[i])[1:3]
            fm, okm = self._on_curve(p[i], br[i], sw[i], x[i] - eps, K0, dtb[i])[1:3]
            K[i] = K0
            iters[i] += 1
            h = (fp - fm) / (2 * eps)
            hx = (fp - 2 * f0 + fm) / eps ** 2
            with np.errstate(divide="ignore", invalid="ignore"):
                dx = -h / hx
            good = ok0 & okp & okm & np.isfinite(dx)
            alive[i[~good]] = False
            i, dx, hx, light_ok = i[good], dx[good], hx[good], light_ok[good]
            fxx[i] = hx
            conv[i] = (np.abs(dx) < 1e-9) & light_ok
            x[i] = np.where(conv[i], x[i], x[i] + np.clip(dx, -0.05, 0.05))
        sel = np.nonzero(alive & conv)[0]
        f, _, ok, X = self._fg(p[sel], br[sel], sw[sel], x[sel], K[sel], dtb[sel])[:4]
        if not fixed:
            # a near miss: the extremum points towards zero
            ok &= f * fxx[sel] > 0
            sel, f, X = sel[ok], f[ok], X[ok]
        return dict(pair=p[sel], branch=br[sel], sw=sw[sel], x=x[sel], X=X, K=K[sel], dtbar=dtb[sel],
                    converged=conv[sel], iterations=iters[sel], fmiss=f, fxx=fxx[sel], index=sel)

    def seed_K(self, pidx):
        c1 = circular_guess(self.s1.take(pidx), self.grid[::4])
        c2 = circular_guess(self.s2.take(pidx), self.grid[::4])
        return np.stack([c1[:, 4], c2[:, 4], np.zeros(len(pidx))], axis=1)

    # -- compatibility and covariance ----------------------------------------
    def evaluate(self, roots, K=None):
        """chi, compatibility residual, element and state covariances for roots."""
        tan = roots.get("tangent")
        if tan is None or not np.any(tan) or K is not None:
            return self._evaluate_roots(roots, K)
        reg = np.nonzero(~tan)[0]
        tg = np.nonzero(tan)[0]
        ea = self._evaluate_roots({k: v[reg] for k, v in roots.items()})
        eb = self._evaluate_tangent({k: v[tg] for k, v in roots.items()})
        out = {}
        for k in ea:
            arr = np.empty((tan.size,) + ea[k].shape[1:])
            arr[reg] = ea[k]
            arr[tg] = eb[k]
            out[k] = arr
        return out

    def _evaluate_tangent(self, roots):
        """As ``_evaluate_roots`` for closest-approach solutions.

        Derivatives against the attributables are taken by re-solving the
        closest approach for each perturbed attributable (light-time
        interval held), and the residual energy mismatch joins
        the compatibility residual in chi.
        """
        p, K, dtb = roots["pair"], roots["K"], roots["dtbar"]
        m = p.size
        s1, s2 = self.s1.take(p), self.s2.take(p)
        A = np.concatenate([s1.att, s2.att], axis=1)
        sig_A = np.sqrt(np.concatenate([np.diagonal(s1.cov, axis1=1, axis2=2),
                                        np.diagonal(s2.cov, axis1=1, axis2=2)], axis=1))
        hA = 0.05 * sig_A
        npert = 17
        Ab = np.repeat(A[:, None, :], npert, axis=1)
        for k in range(8):
            Ab[:, 1 + 2 * k, k] += hA[:, k]
            Ab[:, 2 + 2 * k, k] -= hA[:, k]
        rep = lambda v: np.repeat(v, npert, axis=0)
        Ab = Ab.reshape(m * npert, 8)
        side1 = _Side(rep(s1.t), Ab[:, :4], rep(s1.cov), rep(s1.q), rep(s1.qd))
        side2 = _Side(rep(s2.t), Ab[:, 4:], rep(s2.cov), rep(s2.q), rep(s2.qd))
        pb = PairBatch(side1, side2, self.grid)
        res = pb._tangent(np.arange(m * npert), rep(roots["branch"]), rep(roots["sw"]), rep(roots["x"]),
                          rep(K), rep(dtb), fixed=True)
        X = np.full((m * npert, 4), np.nan)
        f = np.full(m * npert, np.nan)
        X[res["index"]] = res["X"]
        f[res["index"]] = res["fmiss"]
        Ks = np.full(m * npert, np.nan)
        Ks[res["index"]] = res["K"]
        X = X.reshape(m, npert, 4)
        f = f.reshape(m, npert)
        A3 = Ab.reshape(m, npert, 8)
        r3 = lambda v: np.repeat(v[:, None, :], npert, axis=1)
        st1, st2 = _states(X, A3[..., :4], A3[..., 4:], r3(s1.q), r3(s1.qd), r3(s2.q), r3(s2.qd))
        Kb = Ks.reshape(m, npert)
        dtb_b = np.repeat(dtb[:, None], npert, axis=1)
        with np.errstate(invalid="ignore"):
            el1 = cart_to_kep(st1)
            el2 = cart_to_kep(st2)
            delta = _compat(el1, el2, Kb, -dtb_b)
        d0 = _wrap(delta[:, 0])
        dd = _wrap(delta - delta[:, :1])
        el_d = el1 - el1[:, :1]
        el_d[..., 3:] = _wrap(el_d[..., 3:])
        central = lambda arr, k: (arr[:, 1 + 2 * k] - arr[:, 2 + 2 * k]) / (2.0 * hA[:, k, None])
        Md = np.stack([central(dd, k) for k in range(8)], axis=-1)                   # (m, 2, 8)
        Mf = np.stack([central(f[..., None], k) for k in range(8)], axis=-1)         # (m, 1, 8)
        Ms = np.stack([central(st1, k) for k in range(8)], axis=-1)
        Me = np.stack([central(el_d, k) for k in range(8)], axis=-1)
        GA = np.zeros((m, 8, 8))
        GA[:, :4, :4] = s1.cov
        GA[:, 4:, 4:] = s2.cov
        M = np.concatenate([Md, Mf], axis=1)
        G = M @ GA @ np.swapaxes(M, 1, 2)
        v = np.concatenate([d0, f[:, :1]], axis=1)
        # compatibility residual and state along the conic at the nominal attributables
        eps = 1e-4
        ax = np.arange(m)
        Dx = np.zeros((m, 2))
        Sx = np.zeros((m, 6))
        fxx = roots["fxx"] if "fxx" in roots else np.full(m, np.nan)
        along = []
        for sgn in (1.0, -1.0):
            Kc, _, okc, Xc = self._on_curve(p, roots["branch"], roots["sw"], roots["x"] + sgn * eps, K, dtb)[:4]
            sc1, sc2 = _states(Xc, s1.att, s2.att, s1.q, s1.qd, s2.q, s2.qd)
            with np.errstate(invalid="ignore"):
                dc = _compat(cart_to_kep(sc1), cart_to_kep(sc2), Kc, -dtb)
            along.append((_wrap(dc - delta[:, 0]), sc1, okc))
        Dx = (along[0][0] - along[1][0]) / (2 * eps)
        Sx = (along[0][1] - along[1][1]) / (2 * eps)
        chi = np.full(m, np.inf)
        cov_state = Ms @ GA @ np.swapaxes(Ms, 1, 2)
        good = np.all(np.isfinite(G), axis=(1, 2)) & np.all(np.isfinite(v), axis=1) & along[0][2] & along[1][2]
        good &= np.isfinite(fxx) & np.all(np.isfinite(Dx), axis=1)
        good[good] = np.abs(np.linalg.det(G[good])) > 0
        if np.any(good):
            g = np.nonzero(good)[0]
            _, v_adj = _chi_revolutions(v[g], G[g], 1)
            d0[g] = v_adj[:, :2]
            # minimum correction restoring a root: profile over the conic offset
            u = np.linspace(-0.3, 0.3, 1201)
            r = np.empty((g.size, u.size, 3))
            r[..., :2] = v_adj[:, None, :2] + Dx[g][:, None, :] * u[None, :, None]
            r[..., 2] = v_adj[:, None, 2] + 0.5 * fxx[g][:, None] * u[None, :] ** 2
            Gi = np.linalg.inv(G[g])
            c2 = np.einsum("kui,kij,kuj->ku", r, Gi, r)
            best = np.argmin(c2, axis=1)
            cmin = c2[np.arange(g.size), best]
            chi[g] = np.sqrt(np.maximum(cmin, 0.0))
            # spread along the conic allowed by the profile, added to the state covariance
            inside = c2 <= cmin[:, None] + 1.0
            width = 0.5 * (np.max(np.where(inside, u, -np.inf), axis=1) - np.min(np.where(inside, u, np.inf), axis=1))
            cov_state[g] += (width ** 2)[:, None, None] * Sx[g][:, :, None] * Sx[g][:, None, :]
        del ax
        return dict(chi=chi, delta=d0, s1=st1[:, 0], s2=st2[:, 0], el1=el1[:, 0], el2=el2[:, 0],
                    cov_el=Me @ GA @ np.swapaxes(Me, 1, 2), cov_state=cov_state)

    def _evaluate_roots(self, roots, K=None):
        fixed_K = K
        p = roots["pair"]
        X = roots["X"]
        K = roots["K"] if K is None else np.broadcast_to(np.asarray(K, float), p.shape)
        dtb = roots["dtbar"]
        m = p.size
        if m == 0:
            return dict(chi=np.empty(0), delta=np.empty((0, 2)), s1=np.empty((0, 6)), s2=np.empty((0, 6)),
                        el1=np.empty((0, 6)), el2=np.empty((0, 6)), cov_el=np.empty((0, 6, 6)),
                        cov_state=np.empty((0, 6, 6)))
        s1, s2 = self.s1.take(p), self.s2.take(p)
        A = np.concatenate([s1.att, s2.att], axis=1)                 # (m, 8)
        sig_A = np.sqrt(np.concatenate([np.diagonal(s1.cov, axis1=1, axis2=2),
                                        np.diagonal(s2.cov, axis1=1, axis2=2)], axis=1))
        hA = 1e-3 * sig_A
        free_K = fixed_K is None and bool(np.all(roots.get("kfree", True)))
        # unknowns Y = (rho1, rd1, rho2, rd2[, K]); with K free the extra
        # equation K = node rate(elements) closes the system
        Y = np.concatenate([X, K[:, None]], axis=1) if free_K else X
        nu = Y.shape[1]
        hY = np.stack([1e-7 * X[:, 0], 1e-7 * np.maximum(1.0, np.abs(X[:, 1])),
                       1e-7 * X[:, 2], 1e-7 * np.maximum(1.0, np.abs(X[:, 3])),
                       1e-5 * np.abs(K) + 1e-13][:nu], axis=1)
        base_A = 1 + 2 * nu
        npert = base_A + 2 * 8
        Yb = np.repeat(Y[:, None, :], npert, axis=1)
        Ab = np.repeat(A[:, None, :], npert, axis=1)
        for k in range(nu):
            Yb[:, 1 + 2 * k, k] += hY[:, k]
            Yb[:, 2 + 2 * k, k] -= hY[:, k]
        for k in range(8):
            Ab[:, base_A + 2 * k, k] += hA[:, k]
            Ab[:, base_A + 1 + 2 * k, k] -= hA[:, k]
        rep = lambda v: np.repeat(v[:, None, :], npert, axis=1)
        st1, st2 = _states(Yb[..., :4], Ab[..., :4], Ab[..., 4:], rep(s1.q), rep(s1.qd), rep(s2.q), rep(s2.qd))
        Kb = Yb[..., 4] if free_K else np.repeat(K[:, None], npert, axis=1)
        dtb_b = np.repeat(dtb[:, None], npert, axis=1)
        Fres = _integrals_residual(st1, st2, Kb, dtb_b)              # (m, npert, 4)
        with np.errstate(invalid="ignore", divide="ignore"):
            el1 = cart_to_kep(st1)
            el2 = cart_to_kep(st2)
            if free_K:
                Kn = secular_rate_arrays(el1[..., 0], el1[..., 1], el1[..., 2])[2]
                kscale = np.abs(K)[:, None] + 1e-12
                Fres = np.concatenate([Fres, ((Kb - Kn) / kscale)[..., None]], axis=-1)
        delta = _compat(el1, el2, Kb, -dtb_b)                        # (m, npert, 2)
        d0 = _wrap(delta[:, 0])
        dd = _wrap(delta - delta[:, :1])                             # differences against nominal
        el_d = el1 - el1[:, :1]
        el_d[..., 3:] = _wrap(el_d[..., 3:])

        def central(arr, base, k, h):
            return (arr[:, base + 2 * k] - arr[:, base + 2 * k + 1]) / (2.0 * h[:, k, None])

        dY = lambda arr: np.stack([central(arr, 1, k, hY) for k in range(nu)], axis=-1)
        dA = lambda arr: np.stack([central(arr, base_A, k, hA) for k in range(8)], axis=-1)
        Jx, JA = dY(Fres), dA(Fres)
        Dx, DA = dY(dd), dA(dd)
        Sx, SA = dY(st1), dA(st1)
        Ex, EA = dY(el_d), dA(el_d)
        chi = np.full(m, np.inf)
        cov_el = np.full((m, 6, 6), np.nan)
        cov_state = np.full((m, 6, 6), np.nan)
        GA = np.zeros((m, 8, 8))
        GA[:, :4, :4] = s1.cov
        GA[:, 4:, 4:] = s2.cov
        ok = np.abs(np.linalg.det(Jx)) > 0
        if np.any(ok):
            dXdA = -np.linalg.solve(Jx[ok], JA[ok])                              # (k, 4, 8)
            Md = DA[ok] + Dx[ok] @ dXdA
            Ms = SA[ok] + Sx[ok] @ dXdA
            Me = EA[ok] + Ex[ok] @ dXdA
            G = GA[ok]
            Gd = Md @ G @ np.swapaxes(Md, 1, 2)
            cov_state[ok] = Ms @ G @ np.swapaxes(Ms, 1, 2)
            cov_el[ok] = Me @ G @ np.swapaxes(Me, 1, 2)
            good = np.abs(np.linalg.det(Gd)) > 1e-30 * Gd[:, 0, 0] * Gd[:, 1, 1]
            chi_ok = np.full(good.size, np.inf)
            if np.any(good):
                chi_ok[good], d_adj = _chi_revolutions(d0[ok][good], Gd[good], 1)
                d0[np.nonzero(ok)[0][good]] = d_adj
            chi[ok] = chi_ok
        return dict(chi=chi, delta=d0, s1=st1[:, 0], s2=st2[:, 0], el1=el1[:, 0], el2=el2[:, 0],
                    cov_el=cov_el, cov_state=cov_state)

    def candidates(self, roots, ev=None, trail_ids=None):
        """Per-pair lists of LinkageCandidate objects."""
        ev = self.evaluate(roots) if ev is None else ev
        out = [[] for _ in range(self.n)]
        for k in range(roots["pair"].size):
            p = int(roots["pair"][k])
            X = roots["X"][k]
            dt = roots["dtbar"][k]
            t1 = self.s1.t[p] - X[0] / C_LIGHT / DAY
            t2 = t1 + dt / DAY
            s1, s2 = ev["s1"][k], ev["s2"][k]
            cand = LinkageCandidate(
                float(X[0]), float(X[1]), float(X[2]), float(X[3]),
                CartesianState(s1[:3].copy(), s1[3:].copy(), t1), CartesianState(s2[:3].copy(), s2[3:].copy(), t2),
                KeplerianElements.from_array(ev["el1"][k], t1), KeplerianElements.from_array(ev["el2"][k], t2),
                float(roots["K"][k]), float(ev["chi"][k]), ev["cov_el"][k], ev["cov_state"][k],
                int(roots["branch"][k]), bool(roots["converged"][k]), int(roots["iterations"][k]),
                tuple(trail_ids[p]) if trail_ids is not None else (), ev["delta"][k],
                bool(roots["tangent"][k]) if "tangent" in roots else False)
            out[p].append(cand)
        for lst in out:
            lst.sort(key=lambda c: c.chi)
        return out


def _merge_tangent(out, tan, rel: float = 0.02):
    """Append tangent solutions that do not sit next to a real root of the same pair."""
    keep = np.ones(tan["pair"].size, dtype=bool)
    for k in range(keep.size):
        same = out["pair"] == tan["pair"][k]
        if np.any(same):
            d1 = np.abs(out["X"][same, 0] / tan["X"][k, 0] - 1.0)
            d2 = np.abs(out["X"][same, 2] / tan["X"][k, 2] - 1.0)
            keep[k] = not np.any((d1 < rel) & (d2 < rel))
    n = int(np.sum(keep))
    add = dict(pair=tan["pair"][keep], branch=tan["branch"][keep], X=tan["X"][keep], K=tan["K"][keep],
               dtbar=tan["dtbar"][keep], converged=tan["converged"][keep],
               iterations=tan["iterations"][keep], tangent=np.ones(n, dtype=bool), fmiss=tan["fmiss"][keep],
               sw=tan["sw"][keep], x=tan["x"][keep], kfree=np.ones(n, dtype=bool), fxx=tan["fxx"][keep])
    return {k: np.concatenate([out[k], add[k]]) for k in out}


def _dedupe(r):
    """Drop roots of the same pair that converged to the same solution."""
    n = r["pair"].size
    if n < 2:
        return r
    order = np.lexsort((r["X"][:, 2], r["X"][:, 0], r["pair"]))
    keep = np.ones(n, dtype=bool)
    last = None
    for k in order:
        key = (r["pair"][k], r["X"][k, 0], r["X"][k, 2])
        if last is not None and key[0] == last[0] and abs(key[1] - last[1]) < 1e-6 * key[1] \
                and abs(key[2] - last[2]) < 1e-6 * key[2]:
            keep[k] = False
            continue
        last = key
    idx = np.sort(np.nonzero(keep)[0])
    return {k: v[idx] for k, v in r.items()}


# --------------------------------------------------------------------------
# public single-pair API

def _check_pair(A1: Attributable, A2: Attributable):
    if A1.epoch == A2.epoch:
        raise ValueError("attributables must have different epochs")


def solve_two_body_link(A1: Attributable, A2: Attributable, grid=None) -> list:
    """All bound positive-range solutions of the pure two-body system, with chi at K = 0.

    Pairs with D1 parallel to D2 are degenerate and return no candidates.
    """
    _check_pair(A1, A2)
    batch = PairBatch.from_pairs([(A1, A2)], grid)
    if _degenerate(batch):
        log.debug("link: degenerate geometry (D1 parallel to D2)")
        return []
    roots = batch.solve(fixed_K=0.0)
    return batch.candidates(roots, trail_ids=[(A1.trail_id, A2.trail_id)])[0]


def link_j2(A1: Attributable, A2: Attributable, chi_max: Optional[float] = CHI_MAX,
            K: Optional[float] = None, grid=None, max_dt_days: float = 3.0) -> list:
    """Accepted J2 linkage candidates (chi <= chi_max), best first.

    ``K`` fixes the node rate instead of iterating (K = 0 gives the two-body
    system).  ``chi_max=None`` returns every candidate.
    """
    _check_pair(A1, A2)
    if abs(A2.epoch - A1.epoch) > max_dt_days:
        raise ValueError(f"pair interval {abs(A2.epoch - A1.epoch):.2f} d exceeds {max_dt_days} d")
    batch = PairBatch.from_pairs([(A1, A2)], grid)
    if _degenerate(batch):
        log.debug("link: degenerate geometry (D1 parallel to D2)")
        return []
    roots = batch.solve(fixed_K=K)
    if roots["pair"].size == 0:
        log.debug("link: no converged branch")
    cands = batch.candidates(roots, trail_ids=[(A1.trail_id, A2.trail_id)])[0]
    if chi_max is None:
        return cands
    return [c for c in cands if c.chi <= chi_max]


def chi_value(candidate: LinkageCandidate, A1: Attributable, A2: Attributable, K: float) -> float:
    """Compatibility chi of a candidate's (rho, rho_dot) values at node rate K."""
    batch = PairBatch.from_pairs([(A1, A2)])
    roots = dict(pair=np.array([0]), X=candidate.unknowns[None, :], K=np.array([float(K)]),
                 dtbar=np.array([(candidate.state2.epoch - candidate.state1.epoch) * DAY]))
    chi = float(batch.evaluate(roots)["chi"][0])
    if not np.isfinite(chi):
        raise ValueError("singular compatibility covariance (degenerate geometry)")
    return chi


def _degenerate(batch: PairBatch) -> bool:
    w = np.cross(batch.s1.D[0], batch.s2.D[0])
    return float(np.linalg.norm(w)) < 1e-9 * float(np.linalg.norm(batch.s1.D[0]) * np.linalg.norm(batch.s2.D[0]))


# --------------------------------------------------------------------------
# pair sweep

@dataclass(frozen=True)
class PrefilterConfig:
    min_dt_days: float = 0.02
    max_dt_days: float = 3.0
    max_dinc_deg: float = 20.0
    max_dnode_deg: float = 40.0


def prefilter_pairs(side: _Side, guesses, idx_a, idx_b, cfg: PrefilterConfig = PrefilterConfig()):
    """Boolean mask over candidate index pairs passing the cheap compatibility bounds.

    Uses the circular-orbit guess of each attributable: inclinations must be
    close and the nodes must agree after precession at the mean guessed rate.
    Pairs where either guess is missing pass.
    """
    dt = side.t[idx_b] - side.t[idx_a]
    ok = (np.abs(dt) >= cfg.min_dt_days) & (np.abs(dt) <= cfg.max_dt_days)
    g1, g2 = guesses[idx_a], guesses[idx_b]
    have = np.isfinite(g1[:, 2]) & np.isfinite(g2[:, 2])
    dinc = np.abs(g1[:, 2] - g2[:, 2])
    Km = 0.5 * (g1[:, 4] + g2[:, 4])
    dnode = np.abs(_wrap(g2[:, 3] - g1[:, 3] - Km * dt * DAY))
    low_inc = (np.sin(g1[:, 2]) < 0.2) | (np.sin(g2[:, 2]) < 0.2)
    geo = (dinc <= math.radians(cfg.max_dinc_deg)) & (low_inc | (dnode <= math.radians(cfg.max_dnode_deg)))
    return ok & (~have | geo)


def pair_priority(side: _Side, guesses, idx_a, idx_b):
    """Along-track consistency of index pairs under their circular guesses (smaller is better).

    The score is the relative mean-motion change that would close the
    argument-of-latitude gap between the two epochs.  Pairs lacking a guess
    score 0.05.
    """
    def arg_lat(k):
        g = guesses[k]
        r = side.q[k] + g[:, 0:1] * side.u[k]
        node = np.stack([np.cos(g[:, 3]), np.sin(g[:, 3]), np.zeros(len(k))], axis=-1)
        w = np.stack([np.sin(g[:, 3]) * np.sin(g[:, 2]), -np.cos(g[:, 3]) * np.sin(g[:, 2]), np.cos(g[:, 2])],
                     axis=-1)
        return np.arctan2(np.sum(r * np.cross(w, node), -1), np.sum(r * node, -1))

    idx_a, idx_b = np.asarray(idx_a), np.asarray(idx_b)
    g1, g2 = guesses[idx_a], guesses[idx_b]
    with np.errstate(invalid="ignore", divide="ignore"):
        a = 0.5 * (g1[:, 1] + g2[:, 1])
        inc = 0.5 * (g1[:, 2] + g2[:, 2])
        ld, wd, _, _ = secular_rate_arrays(a, 0.0, inc)
        turn = (ld + wd) * (side.t[idx_b] - side.t[idx_a]) * DAY
        gap = _wrap(arg_lat(idx_b) - arg_lat(idx_a) - turn)
        score = np.abs(gap) / np.abs(turn)
    return np.where(np.isfinite(score), score, 0.05)


def link_sweep(atts, pairs, chi_max: float = CHI_MAX, chunk: int = 400, grid=None):
    """Run J2 linkage on index pairs into ``atts``; returns accepted candidates per pair."""
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    side = _Side.from_attributables(atts)
    results = []
    for start in range(0, len(pairs), chunk):
        pc = pairs[start:start + chunk]
        batch = PairBatch(side.take(pc[:, 0]), side.take(pc[:, 1]), grid)
        roots = batch.solve()
        if roots["pair"].size:
            ev = batch.evaluate(roots)
            keep = ev["chi"] <= chi_max
            roots = {k: v[keep] for k, v in roots.items()}
            ev = {k: v[keep] for k, v in ev.items()}
        else:
            ev = None
        ids = [(atts[i].trail_id, atts[j].trail_id) for i, j in pc]
        results.extend(batch.candidates(roots, ev, ids) if roots["pair"].size else [[] for _ in pc])
    return results
