"""Breakup events: fragment generation, cloud states, Gabbard diagram and detection timeline.

Fragment sizes, area-to-mass ratios and ejection speeds follow the NASA
standard breakup model laws; the constants live in ``data/breakup.ini``.
"""
from __future__ import annotations

import configparser
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .astro import DAY, MU, R_EARTH, CartesianState, KeplerianElements, elements_to_state, state_to_elements
from .population import PopulationObject

log = logging.getLogger(__name__)

EXPLOSION, COLLISION = "explosion", "collision"
REENTRY_PERIGEE_KM = 200.0


def load_breakup_constants(path=None) -> dict:
    """Section -> {key: float} from a breakup INI file (bundled defaults when ``None``)."""
    cp = configparser.ConfigParser()
    if path is None:
        cp.read_string(resources.files("debriscat.data").joinpath("breakup.ini").read_text())
    else:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"breakup config not found: {path}")
        cp.read(path)
    out = {}
    for sec in cp.sections():
        out[sec] = {}
        for k, v in cp.items(sec):
            try:
                out[sec][k] = float(v)
            except ValueError:
                raise ValueError(f"[{sec}] {k}: not a number: {v!r}") from None
    return out


CONSTANTS = load_breakup_constants()


def default_parent(epoch: float = 0.0, altitude_km: float = 1400.0, inc_deg: float = 74.0,
                   raan: float = 0.0, arg_lat: float = 0.0) -> CartesianState:
    """Circular parent orbit state."""
    el = KeplerianElements(R_EARTH + altitude_km, 0.0, math.radians(inc_deg), raan, 0.0, arg_lat, epoch)
    return elements_to_state(el)


@dataclass(frozen=True)
class FragmentationEvent:
    kind: str
    parent: CartesianState
    target_mass: float = 1000.0         # kg
    projectile_mass: float = 0.0        # kg, collisions
    impact_speed: float = 0.0           # km/s, collisions
    size_cutoff: float = 0.10           # m
    dv_cutoff: float = 100.0            # m/s
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (EXPLOSION, COLLISION):
            raise ValueError(f"event kind must be {EXPLOSION!r} or {COLLISION!r}")
        if self.target_mass <= 0:
            raise ValueError("target mass must be positive")
        if self.kind == COLLISION and (self.projectile_mass <= 0 or self.impact_speed <= 0):
            raise ValueError("collisions need a positive projectile mass and impact speed")
        if self.size_cutoff <= 0 or self.dv_cutoff <= 0:
            raise ValueError("cutoffs must be positive")
        if np.linalg.norm(self.parent.r) <= R_EARTH:
            raise ValueError("parent must be above the Earth's surface")

    @property
    def epoch(self) -> float:
        return self.parent.epoch


@dataclass(frozen=True)
class Fragment:
    id: str
    size: float                         # characteristic length d (m)
    area_to_mass: float                 # m^2/kg
    mass: float                         # kg
    dv: np.ndarray = field(repr=False)  # m/s, inertial
    elements: Optional[KeplerianElements] = None
    reentering: bool = False

    @property
    def dv_norm(self) -> float:
        return float(np.linalg.norm(self.dv))


def specific_energy(m_proj: float, v_impact: float, M_T: float) -> float:
    """Impact kinetic energy per target mass (J/kg); v in km/s."""
    if m_proj <= 0 or v_impact <= 0 or M_T <= 0:
        raise ValueError("masses and speed must be positive")
    return 0.5 * m_proj * (v_impact * 1000.0) ** 2 / M_T


def is_catastrophic(m_proj: float, v_impact: float, M_T: float, constants=None) -> bool:
    """Catastrophic when the specific energy reaches the threshold (boundary inclusive)."""
    c = (constants or CONSTANTS)["size"]
    return specific_energy(m_proj, v_impact, M_T) >= c["catastrophic_threshold_j_per_kg"]


def cumulative_count(event: FragmentationEvent, L, constants=None):
    """Expected number of fragments larger than L (m)."""
    c = (constants or CONSTANTS)["size"]
    L = np.asarray(L, dtype=float)
    if event.kind == EXPLOSION:
        return c["explosion_coefficient"] * c["explosion_scale"] * L ** (-c["explosion_exponent"])
    M = event.target_mass + event.projectile_mass
    return c["collision_coefficient"] * M ** c["collision_mass_exponent"] * L ** (-c["collision_exponent"])


def size_exponent(kind: str, constants=None) -> float:
    c = (constants or CONSTANTS)["size"]
    return c["explosion_exponent"] if kind == EXPLOSION else c["collision_exponent"]


def _piecewise(lam, lo, hi, v_lo, v_hi):
    """Linear ramp from v_lo at lo to v_hi at hi, constant outside."""
    t = np.clip((lam - lo) / (hi - lo), 0.0, 1.0)
    return v_lo + t * (v_hi - v_lo)


def _am_spacecraft(lam, rng):
    alpha = np.where(lam <= -1.95, 0.0, np.where(lam >= 0.55, 1.0, 0.3 + 0.4 * (lam + 1.2)))
    mu1 = _piecewise(lam, -1.1, 0.0, -0.6, -0.95)
    s1 = _piecewise(lam, -1.3, -0.3, 0.1, 0.3)
    mu2 = _piecewise(lam, -0.7, -0.1, -1.2, -2.0)
    s2 = _piecewise(lam, -0.5, -0.3, 0.5, 0.3)
    first = rng.random(lam.shape) < alpha
    z = rng.standard_normal(lam.shape)
    return np.where(first, mu1 + s1 * z, mu2 + s2 * z)


def _am_small(lam, rng):
    mu = _piecewise(lam, -1.75, -1.25, -0.3, -1.0)
    s = np.where(lam <= -3.5, 0.2, 0.2 + 0.1333 * (lam + 3.5))
    return mu + s * rng.standard_normal(lam.shape)


def area_from_size(L, constants=None):
    c = (constants or CONSTANTS)["area"]
    L = np.asarray(L, dtype=float)
    return np.where(L < c["transition_m"], c["small_coefficient"] * L ** c["small_exponent"],
                    c["large_coefficient"] * L ** c["large_exponent"])


def generate_fragments(event: FragmentationEvent, constants=None) -> list:
    """Fragments larger than the size cutoff, with A/m, mass and an isotropic ejection velocity.

    The total is Poisson-distributed around the cumulative law at the cutoff
    and sizes are drawn by inverse CDF of the power law.
    """
    constants = constants or CONSTANTS
    if event.kind == COLLISION and not is_catastrophic(event.projectile_mass, event.impact_speed,
                                                       event.target_mass, constants):
        raise ValueError("non-catastrophic collision: cratering is not modelled")
    rng = np.random.default_rng(event.seed)
    n = int(rng.poisson(float(cumulative_count(event, event.size_cutoff, constants))))
    beta = size_exponent(event.kind, constants)
    L = event.size_cutoff * rng.random(n) ** (-1.0 / beta)
    lam = np.log10(L)
    br = constants["area_to_mass"]
    w = np.clip((L - br["bridge_lower_m"]) / (br["bridge_upper_m"] - br["bridge_lower_m"]), 0.0, 1.0)
    chi_big = _am_spacecraft(lam, rng)
    chi_small = _am_small(lam, rng)
    chi = np.where(rng.random(n) < w, chi_big, chi_small)
    am = 10.0 ** chi
    area = area_from_size(L, constants)
    mass = area / am
    dvc = constants["delta_v"]
    if event.kind == EXPLOSION:
        mu = dvc["explosion_slope"] * chi + dvc["explosion_offset"]
    else:
        mu = dvc["collision_slope"] * chi + dvc["collision_offset"]
    speed = 10.0 ** (mu + dvc["sigma"] * rng.standard_normal(n))
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    dv = d * speed[:, None]
    prefix = "E" if event.kind == EXPLOSION else "C"
    return [Fragment(f"{prefix}{k:04d}", float(L[k]), float(am[k]), float(mass[k]), dv[k]) for k in range(n)]


def core_fragments(fragments, dv_cutoff: float = 100.0) -> list:
    """Fragments ejected slower than ``dv_cutoff`` (m/s)."""
    return [f for f in fragments if f.dv_norm < dv_cutoff]


def fragment_states(parent: CartesianState, fragments) -> list:
    """Elements of each fragment: parent velocity plus its ejection velocity."""
    out = []
    for f in fragments:
        st = CartesianState(parent.r.copy(), parent.v + np.asarray(f.dv) / 1000.0, parent.epoch)
        out.append(state_to_elements(st))
    return out


def with_states(parent: CartesianState, fragments) -> list:
    """Fragments with their elements and the reentry flag (perigee below 200 km)."""
    out = []
    for f, el in zip(fragments, fragment_states(parent, fragments)):
        reent = (not el.e < 1.0) or el.a * (1.0 - el.e) - R_EARTH < REENTRY_PERIGEE_KM
        out.append(Fragment(f.id, f.size, f.area_to_mass, f.mass, f.dv, el, bool(reent)))
    return out


def cloud_population(event: FragmentationEvent, constants=None, core_only: bool = True) -> list:
    """Orbiting fragments of an event as a survey population."""
    frags = generate_fragments(event, constants)
    if core_only:
        frags = core_fragments(frags, event.dv_cutoff)
    return [PopulationObject(f.id, f.elements, round(f.size, 4))
            for f in with_states(event.parent, frags) if not f.reentering]


# --------------------------------------------------------------------------
# Gabbard diagram

def gabbard(elements) -> np.ndarray:
    """Rows (period min, apogee height km, perigee height km)."""
    rows = []
    for el in elements:
        if not 0.0 <= el.e < 1.0 or el.a <= 0:
            raise ValueError("Gabbard rows need elliptic elements")
        rows.append((2 * math.pi * math.sqrt(el.a ** 3 / MU) / 60.0, el.a * (1 + el.e) - R_EARTH,
                     el.a * (1 - el.e) - R_EARTH))
    return np.array(rows, dtype=float).reshape(-1, 3)


def gabbard_branch_correlations(rows, parent_period_min: float, parent_height_km: float) -> tuple:
    """Correlations of (period excess, apogee excess) above and (period deficit, perigee deficit) below."""
    rows = np.asarray(rows)
    up = rows[rows[:, 0] > parent_period_min]
    dn = rows[rows[:, 0] < parent_period_min]

    def corr(x, y):
        if len(x) < 3 or np.std(x) == 0 or np.std(y) == 0:
            return float("nan")
        return float(np.corrcoef(x, y)[0, 1])
    return (corr(up[:, 0] - parent_period_min, up[:, 1] - parent_height_km),
            corr(parent_period_min - dn[:, 0], parent_height_km - dn[:, 2]))


def format_gabbard(ids, rows) -> str:
    lines = ["fragment,period_min,apogee_km,perigee_km"]
    lines += [f"{i},{r[0]:.6f},{r[1]:.4f},{r[2]:.4f}" for i, r in zip(ids, rows)]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# detection timeline

@dataclass(frozen=True)
class TimelineRow:
    day: int
    fraction_detected: float
    orbits_4: int
    orbits_5: int
    orbits_10: int
    mixed: int = 0


def detection_timeline(event: FragmentationEvent, network, window, seed: int, population=None, inst=None,
                       weather: bool = True, config=None, step_s: float = 10.0):
    """Survey the cloud and run the orbit pipeline day by day.

    Returns (rows, survey result, data center).  Rows hold the cumulative
    fraction of fragments detected by the end of each day and the orbit
    counts with at least 4, 5 and 10 trails.
    """
    from .observation import InstrumentModel
    from .pipeline import DataCenter, PipelineConfig
    from .survey import run_survey

    start, days = window
    pop = population if population is not None else cloud_population(event)
    inst = inst or InstrumentModel()
    res = run_survey(pop, network, (start, days), seed, inst, weather=weather, step_s=step_s)
    truth = {a.trail_id: o for a, o in zip(res.attributables, res.truth)}
    dc = DataCenter(config or PipelineConfig())
    seen = set()
    rows = []
    n = max(len(pop), 1)
    for d in range(int(math.ceil(days))):
        lo, hi = start + d, start + d + 1
        batch = [a for a in res.attributables if lo <= a.epoch < hi]
        seen |= {truth[a.trail_id] for a in batch}
        if batch:
            dc.ingest(batch, label=d + 1)
        counts = {k: 0 for k in (4, 5, 10)}
        mixed = 0
        for c in dc.correlations:
            for k in counts:
                if len(c.trails) >= k:
                    counts[k] += 1
            if len(c.trails) >= 4 and len({truth[t] for t in c.trails}) > 1:
                mixed += 1
        rows.append(TimelineRow(d + 1, len(seen) / n, counts[4], counts[5], counts[10], mixed))
        log.info("fragmentation day %d: %s", d + 1, rows[-1])
    return rows, res, dc


def format_timeline(rows) -> str:
    lines = ["day,fraction_detected,orbits_ge4,orbits_ge5,orbits_ge10,mixed_ge4"]
    lines += [f"{r.day},{r.fraction_detected:.4f},{r.orbits_4},{r.orbits_5},{r.orbits_10},{r.mixed}" for r in rows]
    return "\n".join(lines) + "\n"
