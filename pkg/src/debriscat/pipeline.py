"""Orbit determination pipeline: least squares, attribution, correlation management.

The daily data-center loop (:class:`DataCenter`) tries every new trail
against the known orbits before any pairwise linkage, then links what is
left inside a sliding window, normalises the correlation set and applies
the numbering policy.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .astro import (ARCSEC, C_LIGHT, DAY, TWO_PI, CartesianState, KeplerianElements, cart_to_kep,
                    kep_to_cart, station_position_velocity)
from .linkage import (CHI_MAX, LinkageCandidate, PrefilterConfig, _Side, circular_guess, link_sweep,
                      pair_priority, prefilter_pairs)
from .observation import Attributable, topocentric_arrays
from .propagation import PropagationError, propagate_states, secular_propagate_array, secular_rate_arrays

log = logging.getLogger(__name__)

STATUSES = ("preliminary", "pair", "reliable", "numbered")


class FitError(ValueError):
    """Raised for fits that cannot be attempted (too few observations)."""


# --------------------------------------------------------------------------
# dynamics used by the fit

class SecularModel:
    """Secular J2 model: the Cartesian state is read as mean elements.

    This is the model that generates the synthetic truth, so fits to
    noiseless data recover the truth exactly.
    """
    name = "secular"
    fd_steps = (1e-4, 1e-7)

    def states(self, x0, epoch0: float, t):
        """States (k, n, 6) at epochs ``t`` (n,) or (k, n) from states ``x0`` (k, 6)."""
        x0 = np.atleast_2d(x0)
        el = cart_to_kep(x0)
        dt = (np.asarray(t, dtype=float) - epoch0) * DAY
        if dt.ndim == 1:
            dt = np.broadcast_to(dt, (x0.shape[0], dt.size))
        return kep_to_cart(secular_propagate_array(el[:, None, :], dt))


class NumericalModel:
    """Numerical integration with the J2 zonal term (DOP853)."""
    name = "numerical"
    fd_steps = (1e-3, 1e-6)

    def __init__(self, rtol: float = 1e-11):
        self.rtol = rtol

    def states(self, x0, epoch0: float, t):
        x0 = np.atleast_2d(x0)
        t = np.asarray(t, dtype=float)
        if t.ndim == 2:
            # per-state epochs: integrate each state on its own grid
            return np.stack([self.states(x0[k:k + 1], epoch0, t[k])[0] for k in range(x0.shape[0])])
        return propagate_states(x0, (t - epoch0) * DAY, rtol=self.rtol)


MODELS = {"secular": SecularModel, "numerical": NumericalModel}


def get_model(name_or_model=None):
    if name_or_model is None:
        return SecularModel()
    if isinstance(name_or_model, str):
        try:
            return MODELS[name_or_model]()
        except KeyError:
            raise ValueError(f"unknown dynamical model {name_or_model!r}") from None
    return name_or_model


# --------------------------------------------------------------------------
# configuration and types

@dataclass(frozen=True)
class PipelineConfig:
    chi_max: float = CHI_MAX
    chi_attr_max: float = 5.0
    rms_gate: float = 3.0                   # angular RMS in units of the attributable sigmas
    outlier_sigma: float = 5.0
    reliable_trails: int = 5
    numbering_trails: int = 10
    link_window_days: float = 3.0
    min_link_dt_days: float = 0.02
    max_iter: int = 25
    model: str = "secular"
    max_link_pairs: int = 0                 # 0: no cap on pairs linked per batch

    def status_for(self, n_trails: int, fitted: bool = True) -> str:
        if not fitted:
            return "preliminary"
        if n_trails >= self.numbering_trails:
            return "numbered"
        if n_trails >= self.reliable_trails:
            return "reliable"
        return "pair"


@dataclass
class OrbitEstimate:
    """Orbit at ``epoch`` as a Cartesian state with its 6x6 covariance (km, km/s)."""
    id: str
    epoch: float
    state: np.ndarray
    covariance: np.ndarray
    trails: tuple = ()
    rms: float = float("nan")               # arcsec, over the angular components
    nrms: float = float("nan")              # same residuals in units of their sigmas
    status: str = "preliminary"
    converged: bool = True
    diagnostic: str = ""
    outliers: tuple = ()

    @property
    def elements(self) -> KeplerianElements:
        return KeplerianElements.from_array(cart_to_kep(self.state), self.epoch)

    @property
    def cartesian(self) -> CartesianState:
        return CartesianState(self.state[:3].copy(), self.state[3:].copy(), self.epoch)

    @property
    def element_covariance(self) -> np.ndarray:
        """Covariance of (a, e, I, node, argp, M) by finite-difference mapping."""
        J = np.empty((6, 6))
        base = cart_to_kep(self.state)
        for k in range(6):
            h = 1e-4 if k < 3 else 1e-7
            xp, xm = self.state.copy(), self.state.copy()
            xp[k] += h
            xm[k] -= h
            d = cart_to_kep(xp) - cart_to_kep(xm)
            d[3:] = np.mod(d[3:] + math.pi, TWO_PI) - math.pi
            J[:, k] = d / (2 * h)
        del base
        return J @ self.covariance @ J.T

    @property
    def n_trails(self) -> int:
        return len(self.trails)


@dataclass
class Correlation:
    """A set of trails believed to belong to one object, with its orbit."""
    trails: tuple
    orbit: OrbitEstimate
    provenance: tuple = ()

    def __post_init__(self):
        self.trails = canonical_trails(self.trails)

    @property
    def key(self) -> tuple:
        return self.trails


def _step(provenance: tuple, name: str) -> tuple:
    """Append a build step, collapsing repeats of the same step."""
    return provenance if provenance and provenance[-1] == name else provenance + (name,)


def canonical_trails(trails) -> tuple:
    """Sorted, duplicate-free trail ids: A=B=C and A=C=B normalise identically."""
    return tuple(sorted(set(int(t) for t in trails)))


# --------------------------------------------------------------------------
# prediction

def _observers(atts):
    q = np.empty((len(atts), 3))
    qd = np.empty((len(atts), 3))
    for k, a in enumerate(atts):
        q[k], qd[k] = a.observer()
    return q, qd


def _predict(model, x0, epoch0, t, q, qd, emit=None):
    """Predicted attributables (k, n, 4) of states x0 (k, 6) seen at epochs t with observers q, qd.

    Light time is solved on the first state (two iterations) and the emission
    epochs are reused for the others, which only enter through derivatives.
    Returns (pred, emission epochs).
    """
    x0 = np.atleast_2d(x0)
    if emit is None:
        x = model.states(x0[:1], epoch0, t)[0]
        emit = np.asarray(t, dtype=float)
        for _ in range(2):
            rho = np.linalg.norm(x[:, :3] - q, axis=-1)
            emit = t - rho / C_LIGHT / DAY
            x = model.states(x0[:1], epoch0, emit)[0]
    xs = model.states(x0, epoch0, emit)
    ra, dec, rad, decd, _, _ = topocentric_arrays(xs[..., :3], xs[..., 3:], q, qd)
    return np.stack([ra, dec, rad, decd], axis=-1), emit


def _residual(obs, pred):
    r = obs - pred
    r[..., 0] = np.mod(r[..., 0] + math.pi, TWO_PI) - math.pi
    return r


def _fd_states(x, steps):
    """Nominal plus central-difference perturbations (13, 6) and the step vector."""
    h = np.array([steps[0]] * 3 + [steps[1]] * 3)
    X = np.repeat(x[None, :], 13, axis=0)
    for k in range(6):
        X[1 + 2 * k, k] += h[k]
        X[2 + 2 * k, k] -= h[k]
    return X, h


def _jacobian(model, x, epoch, t, q, qd):
    """Predictions (n, 4) and their Jacobian (n, 4, 6) against the state at ``epoch``."""
    X, h = _fd_states(x, model.fd_steps)
    pred, emit = _predict(model, X, epoch, t, q, qd)
    d = pred[1::2] - pred[2::2]
    d[..., 0] = np.mod(d[..., 0] + math.pi, TWO_PI) - math.pi
    J = np.moveaxis(d / (2 * h[:, None, None]), 0, -1)
    return pred[0], J, emit


def predict_attributable(orbit: OrbitEstimate, epoch: float, station, model=None):
    """Predicted (ra, dec, ra_rate, dec_rate) at ``epoch`` from ``station`` and its 4x4 covariance."""
    model = get_model(model)
    q, qd = station_position_velocity(station, epoch)
    pred, J, _ = _jacobian(model, orbit.state, orbit.epoch, np.array([epoch]), q[None, :], qd[None, :])
    return pred[0], J[0] @ orbit.covariance @ J[0].T


def predict_many(orbit: OrbitEstimate, atts, model=None):
    """Predictions (n, 4) and covariances (n, 4, 4) at the epochs and stations of ``atts``."""
    model = get_model(model)
    t = np.array([a.epoch for a in atts])
    q, qd = _observers(atts)
    pred, J, _ = _jacobian(model, orbit.state, orbit.epoch, t, q, qd)
    return pred, J @ orbit.covariance @ np.swapaxes(J, 1, 2)


def mahalanobis(orbit: OrbitEstimate, atts, model=None) -> np.ndarray:
    """Distance of each attributable from the orbit prediction under the combined covariance."""
    if not atts:
        return np.empty(0)
    pred, cov = predict_many(orbit, atts, model)
    obs = np.array([a.vector for a in atts])
    r = _residual(obs, pred)
    C = cov + np.array([a.covariance for a in atts])
    try:
        d2 = np.einsum("ni,ni->n", r, np.linalg.solve(C, r[..., None])[..., 0])
    except np.linalg.LinAlgError:
        return np.full(len(atts), np.inf)
    return np.sqrt(np.maximum(d2, 0.0))


# --------------------------------------------------------------------------
# least squares

def _whiteners(atts):
    """Inverse Cholesky factors (n, 4, 4) of the attributable covariances."""
    L = np.linalg.cholesky(np.array([a.covariance for a in atts]))
    return np.linalg.inv(L)


def propagate_orbit(orbit: OrbitEstimate, epoch: float, model=None) -> OrbitEstimate:
    """Move the orbit and its covariance to a new epoch (finite-difference transition matrix)."""
    model = get_model(model)
    if epoch == orbit.epoch:
        return orbit
    X, h = _fd_states(orbit.state, model.fd_steps)
    xs = model.states(X, orbit.epoch, np.array([epoch]))[:, 0, :]
    Phi = ((xs[1::2] - xs[2::2]) / (2 * h[:, None])).T
    cov = Phi @ orbit.covariance @ Phi.T
    return replace(orbit, epoch=epoch, state=xs[0], covariance=0.5 * (cov + cov.T))


def differential_correction(prelim: OrbitEstimate, observations, config: PipelineConfig = PipelineConfig(),
                            model=None, epoch: Optional[float] = None) -> OrbitEstimate:
    """Gauss-Newton fit of the orbit to all attributable components.

    Residuals are weighted with each attributable's covariance.  Steps are
    halved when the cost grows; three failed halvings mean divergence, and
    the preliminary orbit is returned with ``converged=False``.  The result
    carries the inverse normal matrix as covariance and the post-fit RMS of
    the angular residuals in arcsec.
    """
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        return _differential_correction(prelim, observations, config, model, epoch)


def _differential_correction(prelim, observations, config, model, epoch):
    atts = list(observations)
    if len(atts) < 2:
        raise FitError(f"underdetermined: {len(atts)} attributable(s) for 6 parameters")
    model = get_model(model if model is not None else config.model)
    atts.sort(key=lambda a: a.epoch)
    epoch = prelim.epoch if epoch is None else epoch
    start = propagate_orbit(prelim, epoch, model) if epoch != prelim.epoch else prelim
    t = np.array([a.epoch for a in atts])
    q, qd = _observers(atts)
    obs = np.array([a.vector for a in atts])
    Wh = _whiteners(atts)
    cosd = np.cos(obs[:, 1])
    trails = canonical_trails([a.trail_id for a in atts if a.trail_id is not None]) or prelim.trails

    def fail(reason):
        log.debug("fit %s failed: %s", prelim.id, reason)
        return replace(prelim, converged=False, diagnostic=reason)

    def cost_of(x):
        try:
            pred, _ = _predict(model, x[None, :], epoch, t, q, qd)
        except (PropagationError, ValueError, FloatingPointError) as exc:
            return np.inf, None
        r = _residual(obs, pred[0])
        z = np.einsum("nij,nj->ni", Wh, r)
        return float(np.sum(z * z)), r

    sig = np.sqrt(np.array([np.diag(a.covariance)[:2] for a in atts]))

    def nrms_of(r):
        return math.sqrt(np.mean((r[:, :2] / sig) ** 2))

    def rms_of(r):
        return math.sqrt(np.mean(np.concatenate([(r[:, 0] * cosd) ** 2, r[:, 1] ** 2]))) / ARCSEC

    x = start.state.astype(float).copy()
    cost, r = cost_of(x)
    if not np.isfinite(cost):
        return fail("propagation failed at the starting orbit")
    converged = False
    N = None
    for it in range(config.max_iter):
        try:
            pred, J, _ = _jacobian(model, x, epoch, t, q, qd)
        except (PropagationError, ValueError) as exc:
            return fail(f"propagation failed: {exc}")
        r = _residual(obs, pred)
        A = np.einsum("nij,njk->nik", Wh, J).reshape(-1, 6)
        b = np.einsum("nij,nj->ni", Wh, r).reshape(-1)
        # column scaling keeps the normal matrix well conditioned
        s = np.linalg.norm(A, axis=0)
        if np.any(s == 0) or not np.all(np.isfinite(A)):
            return fail("degenerate design matrix")
        As = A / s
        N = As.T @ As
        cond = np.linalg.cond(N)
        if not np.isfinite(cond) or cond > 1e14:
            return fail(f"rank-deficient normal matrix (condition number {cond:.3g})")
        dx = np.linalg.solve(N, As.T @ b) / s
        step = 1.0
        rms_old = rms_of(r)
        gain = float(b @ (As @ (dx * s)))
        if gain <= 1e-10 * cost or cost < 1e-12 * b.size:
            converged = True
            break
        for attempt in range(4):
            x_new = x + step * dx
            cost_new, r_new = cost_of(x_new)
            if cost_new <= cost * (1.0 + 1e-12) or cost_new < 1e-20:
                break
            step *= 0.5
        else:
            return fail("divergence: cost grew over 3 damped steps")
        rel = max(np.linalg.norm(step * dx[:3]) / np.linalg.norm(x[:3]),
                  np.linalg.norm(step * dx[3:]) / np.linalg.norm(x[3:]))
        x, cost = x_new, cost_new
        rms_new = rms_of(r_new)
        if rel < 1e-10 or abs(rms_new - rms_old) < 1e-3 * max(rms_old, 1e-12) and it > 0:
            converged = True
            break
    if not converged:
        return fail(f"no convergence in {config.max_iter} iterations")
    pred, J, _ = _jacobian(model, x, epoch, t, q, qd)
    r = _residual(obs, pred)
    A = np.einsum("nij,njk->nik", Wh, J).reshape(-1, 6)
    s = np.linalg.norm(A, axis=0)
    As = A / s
    cov = np.linalg.inv(As.T @ As) / np.outer(s, s)
    cov = 0.5 * (cov + cov.T)
    z = np.einsum("nij,nj->ni", Wh, r)
    flagged = tuple(int(a.trail_id) if a.trail_id is not None else k
                    for k, a in enumerate(atts) if np.max(np.abs(z[k])) > config.outlier_sigma)
    n = len(trails) if trails else len(atts)
    return OrbitEstimate(prelim.id, epoch, x, cov, trails, rms_of(r), nrms_of(r), config.status_for(n), True,
                         "outliers" if flagged else "", flagged)


def fit_is_good(orb: OrbitEstimate, config: PipelineConfig) -> bool:
    return orb.converged and orb.nrms <= config.rms_gate and not orb.outliers \
        and _spd(orb.covariance)


def _spd(C) -> bool:
    try:
        np.linalg.cholesky(C)
        return True
    except np.linalg.LinAlgError:
        return False


def _phase_consistent(x1, x2, dt):
    """Adjust the semi-major axis of x1 so the secular phase reaches that of x2 after dt seconds.

    The two linkage states differ by noise; propagating x1 alone would let a
    tiny mean-motion error accumulate over many revolutions.
    """
    el1, el2 = cart_to_kep(x1), cart_to_kep(x2)
    lam1, lam2 = el1[4] + el1[5], el2[4] + el2[5]

    def rate(a):
        ld, wd, _, _ = secular_rate_arrays(a, el1[1], el1[2])
        return float(ld + wd)

    a = el1[0]
    m = round((rate(a) * dt - (lam2 - lam1)) / TWO_PI)
    target = (lam2 - lam1 + TWO_PI * m) / dt
    for _ in range(8):
        if not a > 1.0:         # Newton ran away; keep x1
            return x1
        h = 1e-3
        slope = (rate(a + h) - rate(a - h)) / (2 * h)
        if slope == 0.0 or not np.isfinite(slope):
            return x1
        step = (rate(a) - target) / slope
        a -= step
        if abs(step) < 1e-9:
            break
    if not (np.isfinite(a) and a > 0 and abs(a - el1[0]) < 0.05 * el1[0]):
        return x1
    el1[0] = a
    return kep_to_cart(el1)


def estimate_from_candidate(cand: LinkageCandidate, orbit_id: str) -> OrbitEstimate:
    """Preliminary orbit from a linkage candidate (state and covariance at the first epoch)."""
    x = _phase_consistent(np.concatenate([cand.state1.r, cand.state1.v]),
                          np.concatenate([cand.state2.r, cand.state2.v]),
                          (cand.state2.epoch - cand.state1.epoch) * DAY)
    return OrbitEstimate(orbit_id, cand.state1.epoch, x, cand.state_covariance, canonical_trails(cand.trail_ids),
                         status="preliminary", converged=cand.converged)


# --------------------------------------------------------------------------
# attribution

@dataclass
class AttributionResult:
    accepted: bool
    orbit: OrbitEstimate
    distance: float
    reason: str


def attribute(orbit: OrbitEstimate, A3: Attributable, chi_attr_max: float = 5.0, observations=(),
              config: PipelineConfig = PipelineConfig(), model=None) -> AttributionResult:
    """Test A3 against the orbit prediction and, inside the gate, refit with it included.

    ``observations`` are the attributables already supporting the orbit.
    """
    if A3.trail_id is not None and A3.trail_id in orbit.trails:
        return AttributionResult(False, orbit, 0.0, "duplicate")
    if any(a is A3 or (a.epoch == A3.epoch and a.station == A3.station and np.array_equal(a.vector, A3.vector))
           for a in observations):
        return AttributionResult(False, orbit, 0.0, "duplicate")
    d = float(mahalanobis(orbit, [A3], model)[0])
    if not d <= chi_attr_max:
        return AttributionResult(False, orbit, d, "gate")
    new = differential_correction(orbit, list(observations) + [A3], config, model, epoch=_fit_epoch(
        list(observations) + [A3]))
    if not fit_is_good(new, config):
        return AttributionResult(False, orbit, d, "fit: " + (new.diagnostic or f"rms {new.rms:.2f} arcsec ({new.nrms:.2f} sigma)"))
    return AttributionResult(True, new, d, "accepted")


def _fit_epoch(atts) -> float:
    """Fit epoch: the latest observation, rounded to the millisecond."""
    return round(max(a.epoch for a in atts) * DAY * 1000.0) / (DAY * 1000.0)


# --------------------------------------------------------------------------
# correlation management

def manage_correlations(correlations, store, config: PipelineConfig = PipelineConfig(), model=None):
    """Normalise a correlation set.

    Identical trail sets collapse (lower RMS kept); sets contained in an
    accepted one are removed as inferior; discordant sets sharing trails
    are merged when a joint fit of the union passes the quality gates, and
    otherwise the one with more trails (then lower RMS) wins.  Statuses
    follow the numbering policy.
    """
    best = {}
    for c in correlations:
        k = canonical_trails(c.trails)
        if k not in best or _rank(c) < _rank(best[k]):
            best[k] = c
    order = sorted(best.values(), key=_rank)
    accepted: list = []
    owner: dict = {}
    for c in order:
        s = set(c.trails)
        if any(a is not None and s <= set(a.trails) for a in accepted):
            continue
        clash = sorted({owner[t] for t in s if t in owner})
        if not clash:
            _accept(accepted, owner, c)
            continue
        merged = c
        ok = True
        for idx in clash:
            other = accepted[idx]
            if other is None:
                continue
            union = set(other.trails) | set(merged.trails)
            atts = [store[t] for t in sorted(union)]
            base = other.orbit if other.orbit.n_trails >= merged.orbit.n_trails else merged.orbit
            try:
                fit = differential_correction(base, atts, config, model, epoch=_fit_epoch(atts))
            except FitError:
                fit = None
            if fit is not None and fit_is_good(fit, config):
                merged = Correlation(tuple(union), replace(fit, id=other.orbit.id),
                                     _step(other.provenance + merged.provenance, "merge"))
                accepted[idx] = None
                for t in other.trails:
                    owner.pop(t, None)
            else:
                ok = False
                break
        if ok:
            _accept(accepted, owner, merged)
    out = [c for c in accepted if c is not None]
    for c in out:
        c.orbit = replace(c.orbit, trails=c.trails, status=config.status_for(len(c.trails), c.orbit.converged
                                                                             and np.isfinite(c.orbit.rms)))
    out.sort(key=lambda c: c.trails)
    return out


def identify_correlations(correlations, store, config: PipelineConfig = PipelineConfig(), model=None,
                          changed=None):
    """Merge disjoint correlations that describe the same object.

    A smaller correlation is a merge candidate for a larger one when every
    one of its trails falls inside the larger orbit's attribution gate; the
    merge is kept when the joint fit passes the quality gates.  With
    ``changed`` (a set of trail tuples) only pairs involving a changed
    correlation are examined.
    """
    corrs = sorted(correlations, key=_rank)
    alive = [True] * len(corrs)
    for i in range(len(corrs)):
        if not alive[i]:
            continue
        A = corrs[i]
        ea = cart_to_kep(A.orbit.state)
        cand = []
        for j in range(i + 1, len(corrs)):
            B = corrs[j]
            if not alive[j] or (changed is not None and A.trails not in changed and B.trails not in changed):
                continue
            eb = cart_to_kep(B.orbit.state)
            if abs(ea[0] - eb[0]) > 0.02 * ea[0] or abs(ea[2] - eb[2]) > math.radians(2.0):
                continue
            cand.append(j)
        if not cand:
            continue
        atts = [store[t] for j in cand for t in corrs[j].trails]
        d = mahalanobis(A.orbit, atts, model)
        k = 0
        for j in cand:
            n = len(corrs[j].trails)
            dj, k = d[k:k + n], k + n
            if not np.all(dj <= config.chi_attr_max):
                continue
            union = [store[t] for t in sorted(set(A.trails) | set(corrs[j].trails))]
            fit = differential_correction(A.orbit, union, config, model, epoch=_fit_epoch(union))
            if fit_is_good(fit, config):
                A = Correlation(tuple(t.trail_id for t in union), replace(fit, id=A.orbit.id),
                                _step(A.provenance, "identification"))
                alive[j] = False
        corrs[i] = A
    out = [c for c, ok in zip(corrs, alive) if ok]
    for c in out:
        c.orbit = replace(c.orbit, trails=c.trails, status=config.status_for(len(c.trails)))
    out.sort(key=lambda c: c.trails)
    return out


def _rank(c: Correlation):
    rms = c.orbit.nrms if np.isfinite(c.orbit.nrms) else 1e9
    return (-len(c.trails), rms, c.trails)


def _accept(accepted, owner, c):
    accepted.append(c)
    for t in c.trails:
        owner[t] = len(accepted) - 1


# --------------------------------------------------------------------------
# data center

class DataCenter:
    """Daily batch processing of attributables into a catalog of correlations.

    Each batch runs attribution to the existing catalog, then linkage of the
    remaining trails inside the window, then correlation management.  The
    order of phases is recorded in ``oplog`` and checked by
    :meth:`check_op_order`.
    """

    def __init__(self, config: PipelineConfig = PipelineConfig(), model=None):
        self.config = config
        self.model = get_model(model if model is not None else config.model)
        self.store: dict = {}
        self.correlations: list = []
        self.oplog: list = []
        self._next_id = 1
        self._batches = 0

    # -- helpers -----------------------------------------------------------
    def _new_id(self) -> str:
        oid = f"C{self._next_id:05d}"
        self._next_id += 1
        return oid

    def assigned(self) -> set:
        return {t for c in self.correlations for t in c.trails}

    def catalog(self, min_trails: int = 3) -> list:
        return [c.orbit for c in self.correlations if len(c.trails) >= min_trails]

    def check_op_order(self) -> bool:
        """True when every batch ran attribution before linkage."""
        seen = {}
        for batch, op in self.oplog:
            seen.setdefault(batch, []).append(op)
        for ops in seen.values():
            if "linkage" in ops and ("attribution" not in ops or ops.index("attribution") > ops.index("linkage")):
                return False
        return True

    # -- phases ------------------------------------------------------------
    def _attribute_to(self, corr: Correlation, pool: list) -> tuple:
        """Attribute trails of ``pool`` (ids) to one correlation; returns (correlation, used ids)."""
        used = []
        cand = list(pool)
        while cand:
            atts = [self.store[t] for t in cand]
            d = mahalanobis(corr.orbit, atts, self.model)
            inside = [cand[k] for k in np.argsort(d, kind="stable") if d[k] <= self.config.chi_attr_max]
            if not inside:
                break
            progressed = False
            for tid in inside:
                res = attribute(corr.orbit, self.store[tid], self.config.chi_attr_max,
                                [self.store[t] for t in corr.trails], self.config, self.model)
                cand.remove(tid)
                if res.accepted:
                    corr = Correlation(corr.trails + (tid,), res.orbit, _step(corr.provenance, "attribution"))
                    used.append(tid)
                    progressed = True
                    break
            if not progressed:
                break
        return corr, used

    def _attribution_phase(self, new_ids: list, label) -> list:
        self.oplog.append((label, "attribution"))
        pool = list(new_ids)
        updated = []
        for corr in sorted(self.correlations, key=_rank):
            if pool:
                corr, used = self._attribute_to(corr, pool)
                pool = [t for t in pool if t not in used]
            updated.append(corr)
        self.correlations = updated
        return pool

    def _link_pairs(self, pool_ids: list, new_ids: set):
        cfg = self.config
        atts = [self.store[t] for t in pool_ids]
        if len(atts) < 2:
            return []
        side = _Side.from_attributables(atts)
        guesses = circular_guess(side)
        t = side.t
        ia, ib = [], []
        order = np.argsort(t, kind="stable")
        for jj, j in enumerate(order):
            for i in order[:jj]:
                if pool_ids[i] in new_ids or pool_ids[j] in new_ids:
                    ia.append(i)
                    ib.append(j)
        if not ia:
            return []
        ia, ib = np.array(ia), np.array(ib)
        pc = PrefilterConfig(min_dt_days=cfg.min_link_dt_days, max_dt_days=cfg.link_window_days)
        keep = prefilter_pairs(side, guesses, ia, ib, pc)
        ia, ib = ia[keep], ib[keep]
        if cfg.max_link_pairs and ia.size > cfg.max_link_pairs:
            # most along-track-consistent pairs first
            o = np.argsort(pair_priority(side, guesses, ia, ib), kind="stable")[:cfg.max_link_pairs]
            o.sort()
            log.info("linkage: pair budget reached, %d of %d pairs kept", cfg.max_link_pairs, ia.size)
            ia, ib = ia[o], ib[o]
        log.debug("linkage: %d pairs", ia.size)
        pairs = np.stack([ia, ib], axis=1)
        res = link_sweep(atts, pairs, cfg.chi_max)
        return [(pool_ids[i], pool_ids[j], c) for (i, j), c in zip(pairs, res) if c]

    def _linkage_phase(self, pool: list, new_ids: set, label) -> list:
        self.oplog.append((label, "linkage"))
        found = self._link_pairs(pool, new_ids)
        out = []
        taken = set()
        for ta, tb, cands in found:
            if ta in taken and tb in taken:
                continue
            atts = [self.store[ta], self.store[tb]]
            for cand in sorted(cands, key=lambda c: c.chi):
                pre = estimate_from_candidate(cand, self._new_id())
                fit = differential_correction(pre, atts, self.config, self.model, epoch=_fit_epoch(atts))
                if fit_is_good(fit, self.config):
                    corr = Correlation((ta, tb), fit, ("linkage",))
                    rest = [t for t in pool if t not in (ta, tb) and t not in taken]
                    corr, used = self._attribute_to(corr, rest)
                    out.append(corr)
                    if len(corr.trails) >= 3:
                        taken.update(corr.trails)
                    break
        return out

    def ingest(self, atts, label=None) -> dict:
        """Process one batch of attributables (their trail ids must be unique)."""
        label = self._batches if label is None else label
        self._batches += 1
        atts = sorted(atts, key=lambda a: (a.epoch, a.station.name, a.ra, a.dec))
        new_ids = []
        for a in atts:
            if a.trail_id is None:
                raise ValueError("attributables need trail ids")
            if a.trail_id in self.store:
                raise ValueError(f"duplicate trail id {a.trail_id}")
            self.store[a.trail_id] = a
            new_ids.append(a.trail_id)
        self.oplog.append((label, "ingest"))
        left = self._attribution_phase(new_ids, label)
        latest = max((a.epoch for a in atts), default=0.0)
        assigned = self.assigned()
        pool = [t for t, a in self.store.items()
                if t not in assigned and a.epoch >= latest - self.config.link_window_days]
        pool.sort(key=lambda t: (self.store[t].epoch, t))
        fresh = self._linkage_phase(pool, set(left), label)
        self.oplog.append((label, "management"))
        before = {c.trails for c in self.correlations}
        managed = manage_correlations(self.correlations + fresh, self.store, self.config, self.model)
        changed = {c.trails for c in managed} - before
        self.correlations = identify_correlations(managed, self.store, self.config, self.model, changed)
        stats = dict(batch=label, new=len(atts), attributed=len(new_ids) - len(left), new_correlations=len(fresh),
                     catalog=len(self.catalog()))
        log.info("batch %s: %s", label, stats)
        return stats


# --------------------------------------------------------------------------
# catalog persistence (one JSON record per line)

def orbit_to_record(orb: OrbitEstimate) -> dict:
    state = [float(f"{v:.12g}") for v in orb.state]
    el = cart_to_kep(np.array(state))      # from the stored digits, so re-serialising is stable
    return {
        "id": orb.id,
        "epoch": round(orb.epoch, 8),
        "state": state,
        "covariance": [[float(f"{v:.12g}") for v in row] for row in orb.covariance],
        "elements": {"a_km": float(f"{el[0]:.12g}"), "e": float(f"{el[1]:.12g}"),
                     "inc_deg": float(f"{math.degrees(el[2]):.10g}"),
                     "raan_deg": float(f"{math.degrees(el[3]):.10g}"),
                     "argp_deg": float(f"{math.degrees(el[4]):.10g}"),
                     "mean_anomaly_deg": float(f"{math.degrees(el[5]):.10g}")},
        "trails": [int(t) for t in orb.trails],
        "rms_arcsec": None if not np.isfinite(orb.rms) else round(float(orb.rms), 6),
        "rms_sigma": None if not np.isfinite(orb.nrms) else round(float(orb.nrms), 6),
        "status": orb.status,
    }


def orbit_from_record(rec: dict) -> OrbitEstimate:
    for key in ("id", "epoch", "state", "covariance", "trails", "status"):
        if key not in rec:
            raise ValueError(f"catalog record missing {key!r}")
    if rec["status"] not in STATUSES:
        raise ValueError(f"unknown status {rec['status']!r}")
    cov = np.array(rec["covariance"], dtype=float)
    state = np.array(rec["state"], dtype=float)
    if state.shape != (6,) or cov.shape != (6, 6):
        raise ValueError("state must have 6 and covariance 6x6 entries")
    rms, nrms = rec.get("rms_arcsec"), rec.get("rms_sigma")
    return OrbitEstimate(str(rec["id"]), float(rec["epoch"]), state, cov, tuple(int(t) for t in rec["trails"]),
                         float("nan") if rms is None else float(rms), float("nan") if nrms is None else float(nrms),
                         rec["status"])


def format_catalog(orbits) -> str:
    return "".join(json.dumps(orbit_to_record(o), sort_keys=True) + "\n" for o in orbits)


def parse_catalog(text: str, source: str = "<catalog>") -> list:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(orbit_from_record(json.loads(line)))
        except (ValueError, TypeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
    return out


def write_catalog(orbits, path) -> None:
    Path(path).write_text(format_catalog(orbits))


def append_catalog(orbits, path) -> None:
    with open(path, "a") as fh:
        fh.write(format_catalog(orbits))


def load_catalog(path) -> list:
    return parse_catalog(Path(path).read_text(), str(path))
