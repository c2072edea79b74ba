"""Catalog scoring: orbital classes, radar curves, accuracy envelopes, tasking feasibility, reports."""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .astro import ARCSEC, R_EARTH, KeplerianElements

LEO, PLEO, HLEO, OUT = "LEO", "PLEO", "HLEO", "OUT"
CLASSES = (LEO, PLEO, HLEO)
LEO_A_MAX = R_EARTH + 2000.0
HLEO_A_MIN = 25000.0


def classify(el: KeplerianElements) -> str:
    """LEO (resident), PLEO (partial) or HLEO (transit); OUT when the perigee is above 2000 km."""
    if el.a * (1.0 - el.e) - R_EARTH >= 2000.0:
        return OUT
    if el.a <= LEO_A_MAX:
        return LEO
    return PLEO if el.a < HLEO_A_MIN else HLEO


# --------------------------------------------------------------------------
# radar comparison

@dataclass(frozen=True)
class RadarCurve:
    h_ref: float = 2000.0   # km
    d_ref: float = 20.0     # cm
    name: str = "enhanced"

    def __post_init__(self):
        if self.h_ref <= 0 or self.d_ref <= 0:
            raise ValueError("radar curve parameters must be positive")


ENHANCED_RADAR = RadarCurve(2000.0, 20.0, "enhanced")
BASELINE_RADAR = RadarCurve(2000.0, 32.0, "baseline")


def radar_min_diameter(h_p: float, curve: RadarCurve = ENHANCED_RADAR) -> float:
    """Smallest diameter (cm) the radar sees at perigee height ``h_p`` (km)."""
    if h_p <= 0:
        raise ValueError("perigee height must be positive")
    return (h_p / curve.h_ref) ** 2 * curve.d_ref


# --------------------------------------------------------------------------
# accuracy envelope

@dataclass(frozen=True)
class EnvelopeSpec:
    """Requirement semi-axes along (u radial, v, w angular momentum)."""
    position_m: tuple = (4.0, 30.0, 20.0)
    velocity_mm_s: tuple = (20.0, 4.0, 20.0)

    def __post_init__(self):
        if len(self.position_m) != 3 or len(self.velocity_mm_s) != 3:
            raise ValueError("envelope needs three semi-axes for position and for velocity")
        if min(self.position_m) <= 0 or min(self.velocity_mm_s) <= 0:
            raise ValueError("envelope semi-axes must be positive")

    @property
    def C_position(self) -> np.ndarray:
        return np.diag(1.0 / np.asarray(self.position_m, dtype=float) ** 2)

    @property
    def C_velocity(self) -> np.ndarray:
        return np.diag(1.0 / np.asarray(self.velocity_mm_s, dtype=float) ** 2)

    @property
    def P_position(self) -> np.ndarray:
        return np.diag(1.0 / np.asarray(self.position_m, dtype=float))

    @property
    def P_velocity(self) -> np.ndarray:
        return np.diag(1.0 / np.asarray(self.velocity_mm_s, dtype=float))


LEO_ENVELOPE = EnvelopeSpec((4.0, 30.0, 20.0), (20.0, 4.0, 20.0))
PLEO_ENVELOPE = EnvelopeSpec((10.0, 60.0, 200.0), (20.0, 4.0, 20.0))


def envelope_for(cls: str) -> EnvelopeSpec:
    return LEO_ENVELOPE if cls == LEO else PLEO_ENVELOPE


def uvw_frame(r, v) -> np.ndarray:
    """Rows u, v, w of the object-centred frame."""
    r = np.asarray(r, dtype=float)
    h = np.cross(r, np.asarray(v, dtype=float))
    if np.linalg.norm(r) == 0 or np.linalg.norm(h) == 0:
        raise ValueError("degenerate state: frame undefined")
    u = r / np.linalg.norm(r)
    w = h / np.linalg.norm(h)
    return np.array([u, np.cross(w, u), w])


def _max_eig_norm(P, Gamma) -> float:
    M = P @ Gamma @ P.T
    return float(math.sqrt(max(np.linalg.eigvalsh(0.5 * (M + M.T))[-1], 0.0)))


def envelope_norm(covariance, state, spec: EnvelopeSpec = LEO_ENVELOPE) -> tuple:
    """(position norm, velocity norm) of a 6x6 Cartesian covariance (km, km/s) against ``spec``.

    ``state`` is a CartesianState or a 6-vector and only defines the frame.
    A norm <= 1 means the 1-sigma confidence ellipsoid lies inside the
    requirement ellipsoid.
    """
    cov = np.asarray(covariance, dtype=float)
    if cov.shape != (6, 6) or np.max(np.abs(cov - cov.T)) > 1e-9 * np.max(np.abs(cov)):
        raise ValueError("covariance must be a symmetric 6x6 matrix")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError("covariance is not positive definite") from None
    if hasattr(state, "r"):
        r, v = state.r, state.v
    else:
        r, v = np.asarray(state)[:3], np.asarray(state)[3:]
    R = uvw_frame(r, v)
    gp = R @ cov[:3, :3] @ R.T * 1e6        # m^2
    gv = R @ cov[3:, 3:] @ R.T * 1e12       # (mm/s)^2
    return _max_eig_norm(spec.P_position, gp), _max_eig_norm(spec.P_velocity, gv)


def containment_oracle(Gamma, C_req, n: int = 10_000, seed: int = 0) -> bool:
    """Sampling check: are ``n`` points of the ellipsoid x^T Gamma^-1 x = 1 inside x^T C_req x <= 1?"""
    rng = np.random.default_rng(seed)
    L = np.linalg.cholesky(Gamma)
    d = rng.standard_normal((n, Gamma.shape[0]))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    x = d @ L.T
    return bool(np.all(np.einsum("ni,ij,nj->n", x, C_req, x) <= 1.0))


# --------------------------------------------------------------------------
# tasking feasibility

MAX_REL_VELOCITY = 7.5e-4


@dataclass(frozen=True)
class FeasibilityBounds:
    angular: float              # rad, sqrt(lambda_P) / h_p
    rel_velocity: float         # sqrt(lambda_V) / |v|
    lambda_p: float             # km^2
    lambda_v: float             # (km/s)^2
    passed: bool = True
    reason: str = ""

    @property
    def angular_arcsec(self) -> float:
        return self.angular / ARCSEC


def feasibility_bounds(covariance, state, h_p: float) -> tuple:
    """(angular bound rad, relative velocity bound, lambda_P, lambda_V)."""
    cov = np.asarray(covariance, dtype=float)
    lp = max(float(np.linalg.eigvalsh(0.5 * (cov[:3, :3] + cov[:3, :3].T))[-1]), 0.0)
    lv = max(float(np.linalg.eigvalsh(0.5 * (cov[3:, 3:] + cov[3:, 3:].T))[-1]), 0.0)
    return math.sqrt(lp) / h_p, math.sqrt(lv) / float(np.linalg.norm(state[3:])), lp, lv


def tasking_feasibility(orbit, horizon_days: float = 7.0, fov_half_width_arcsec=None,
                        max_rel_velocity: float = MAX_REL_VELOCITY, model=None) -> FeasibilityBounds:
    """Bounds on the prediction error at the end of the horizon and the tasking verdict.

    Passes when the relative velocity bound is below ``max_rel_velocity`` and
    the angular bound keeps the object inside the field of view.
    """
    from .observation import InstrumentModel
    from .pipeline import propagate_orbit

    if fov_half_width_arcsec is None:
        fov_half_width_arcsec = InstrumentModel().fov_half_width_arcsec
    end = propagate_orbit(orbit, orbit.epoch + horizon_days, model)
    el = end.elements
    h_p = el.a * (1.0 - el.e) - R_EARTH
    ang, rel, lp, lv = feasibility_bounds(end.covariance, end.state, h_p)
    reasons = []
    if not rel < max_rel_velocity:
        reasons.append(f"relative velocity bound {rel:.2e} >= {max_rel_velocity:.1e}")
    if not ang / ARCSEC <= fov_half_width_arcsec:
        reasons.append(f"angular bound {ang / ARCSEC:.1f} arcsec outside the field")
    return FeasibilityBounds(ang, rel, lp, lv, not reasons, "; ".join(reasons))


# --------------------------------------------------------------------------
# efficiency of catalog build-up

EFFICIENCY_ROWS = ("No. Objects", "Orbits Computed", "Obj. without orbit", "(with 1-2 Tr.)", "Obj. not observed",
                   "False correlations")
COLUMNS = ("Total",) + CLASSES


@dataclass
class EfficiencyReport:
    counts: dict                            # row -> column -> int
    efficiency: dict                        # region -> column -> fraction (nan when empty)
    cataloged: set = field(default_factory=set)
    mixed: list = field(default_factory=list)

    def table(self) -> list:
        rows = [["", *COLUMNS]]
        for r in EFFICIENCY_ROWS:
            rows.append([r] + [str(self.counts[r][c]) for c in COLUMNS])
        for region, vals in self.efficiency.items():
            rows.append([region] + ["" if not np.isfinite(vals[c]) else f"{100 * vals[c]:.1f}" for c in COLUMNS])
        return rows


def _truth_map(truth) -> dict:
    return dict(truth) if isinstance(truth, dict) else dict(enumerate(truth))


def efficiency_report(catalog, truth, population, curves=(ENHANCED_RADAR,), min_trails: int = 3,
                      observed_trails=None) -> EfficiencyReport:
    """Score a catalog against the truth sidecar.

    ``truth`` maps trail ids to object ids (a list is read as indexed by
    trail id).  An object counts as cataloged when an orbit with at least
    ``min_trails`` trails uses only its trails; orbits mixing objects are
    reported as false correlations.  Efficiencies are weighted by the
    sampling factor of each object; radar regions use truth diameter and
    truth perigee.
    """
    tmap = _truth_map(truth)
    per_obj = defaultdict(int)
    for tid in (observed_trails if observed_trails is not None else tmap):
        per_obj[tmap[tid]] += 1
    cataloged, mixed = set(), []
    for orb in catalog:
        if len(orb.trails) < min_trails:
            continue
        owners = {tmap.get(t) for t in orb.trails}
        if len(owners) == 1 and None not in owners:
            cataloged |= owners
        else:
            mixed.append(orb.id)
    counts = {r: dict.fromkeys(COLUMNS, 0) for r in EFFICIENCY_ROWS}
    regions = {"Eff. Catalog": None}
    for curve in curves:
        regions[f"Eff. above {curve.name} radar"] = curve
    num = {k: dict.fromkeys(COLUMNS, 0.0) for k in regions}
    den = {k: dict.fromkeys(COLUMNS, 0.0) for k in regions}
    for obj in population:
        cls = classify(obj.elements)
        if cls == OUT:
            continue
        cols = ("Total", cls)
        ok = obj.id in cataloged
        for c in cols:
            counts["No. Objects"][c] += 1
            if ok:
                counts["Orbits Computed"][c] += 1
            elif per_obj.get(obj.id, 0) > 0:
                counts["Obj. without orbit"][c] += 1
                if per_obj[obj.id] <= 2:
                    counts["(with 1-2 Tr.)"][c] += 1
            else:
                counts["Obj. not observed"][c] += 1
        h_p = obj.elements.a * (1.0 - obj.elements.e) - R_EARTH
        w = float(getattr(obj, "sampling_factor", 1.0))
        for name, curve in regions.items():
            if curve is not None and obj.diameter * 100.0 < radar_min_diameter(h_p, curve):
                continue
            for c in cols:
                den[name][c] += w
                num[name][c] += w if ok else 0.0
    counts["False correlations"]["Total"] = len(mixed)
    eff = {k: {c: (num[k][c] / den[k][c] if den[k][c] > 0 else float("nan")) for c in COLUMNS} for k in regions}
    return EfficiencyReport(counts, eff, cataloged, mixed)


# --------------------------------------------------------------------------
# orbit accuracy after tasking

@dataclass(frozen=True)
class AccuracyRecord:
    object_id: str
    orbit_id: str
    cls: str
    position_norm: float
    velocity_norm: float
    angular_arcsec: float           # covariance bound sqrt(lambda_P) / h_p
    rel_velocity_error: float       # actual prediction error against the truth

    @property
    def within(self) -> bool:
        return self.position_norm <= 1.0 and self.velocity_norm <= 1.0


ACCURACY_HEADER = ("class", "objects", "norms <= 1 (%)", "max norm position", "max norm velocity",
                   "max ang. err. (arcsec)", "ang. err. <= 1.5 arcsec (%)", "max rel. velocity error")


def accuracy_summary(records, cls: str = LEO) -> list:
    rs = [r for r in records if r.cls == cls]
    if not rs:
        return [cls, "0", "", "", "", "", "", ""]
    n = len(rs)
    return [cls, str(n),
            f"{100.0 * sum(r.within for r in rs) / n:.1f}",
            f"{max(r.position_norm for r in rs):.3f}",
            f"{max(r.velocity_norm for r in rs):.3f}",
            f"{max(r.angular_arcsec for r in rs):.2f}",
            f"{100.0 * sum(r.angular_arcsec <= 1.5 for r in rs) / n:.1f}",
            f"{max(r.rel_velocity_error for r in rs):.3e}"]


# --------------------------------------------------------------------------
# delimited writers

def format_rows(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def parse_rows(text: str) -> list:
    return [row for row in csv.reader(io.StringIO(text))]


def format_accuracy(records) -> str:
    rows = [list(ACCURACY_HEADER)] + [accuracy_summary(records, c) for c in (LEO, PLEO)]
    return format_rows(rows)


def format_norms(records) -> str:
    rows = [["object", "orbit", "class", "position_norm", "velocity_norm", "angular_arcsec", "rel_velocity_error"]]
    for r in sorted(records, key=lambda r: r.object_id):
        rows.append([r.object_id, r.orbit_id, r.cls, f"{r.position_norm:.6g}", f"{r.velocity_norm:.6g}",
                     f"{r.angular_arcsec:.6g}", f"{r.rel_velocity_error:.6g}"])
    return format_rows(rows)
