"""Network survey simulation: passes, light-aware scheduling, attributable stream."""
from __future__ import annotations

import csv
import io
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .astro import (ARCSEC, DAY, R_EARTH, Station, epoch_from_iso, epoch_to_iso,
                    station_position_velocity, sun_direction)
from .network import FormatError
from .observation import (Attributable, Detection, InstrumentModel, elevation_of,
                          in_earth_shadow, phase_angle, solar_elevation, synthesize_observation)
from .population import PopulationObject, load_population  # noqa: F401  (re-export)

log = logging.getLogger(__name__)


@dataclass
class Pass:
    object_id: str
    station: Station
    rise: float
    set: float
    peak_elevation: float
    epochs: np.ndarray = field(repr=False)
    phases: np.ndarray = field(repr=False)
    night_start: float = 0.0

    @property
    def duration_s(self) -> float:
        return (self.set - self.rise) * DAY


@dataclass(frozen=True)
class Exposure:
    station: Station
    epoch: float            # exposure start (days)
    target: str             # object id (truth side) or catalog id (tasking)
    mode: str = "survey"
    phase: float = 0.0
    pointing: Optional[tuple] = None   # predicted (ra, dec, ra_rate, dec_rate) for tasking


def _runs(mask):
    """Start/stop (exclusive) indices of True runs in a 1-D boolean array."""
    m = np.concatenate([[False], mask, [False]]).astype(np.int8)
    d = np.diff(m)
    return np.nonzero(d == 1)[0], np.nonzero(d == -1)[0]


class VisibilityGrid:
    """Time grid shared by all objects: Sun vectors, station states, darkness."""

    def __init__(self, stations, start: float, days: float, step_s: float = 10.0,
                 inst: InstrumentModel = InstrumentModel()):
        self.stations = list(stations)
        self.start = start
        self.step_s = step_s
        n = int(round(days * DAY / step_s)) + 1
        self.t = start + np.arange(n) * (step_s / DAY)
        self.sun = sun_direction(self.t)
        self.inst = inst
        self.q = []
        self.dark = []
        self.night_start = []
        sun_max = math.radians(inst.sun_elevation_max_deg)
        for st in self.stations:
            q, _ = station_position_velocity(st, self.t)
            dark = solar_elevation(q, self.sun) < sun_max
            ns = np.full(n, np.nan)
            for a, b in zip(*_runs(dark)):
                ns[a:b] = self.t[a]
            self.q.append(q)
            self.dark.append(dark)
            self.night_start.append(ns)

    def passes(self, obj: PopulationObject, stations=None):
        """All visibility passes of ``obj`` over the grid, per station."""
        x = obj.state_at(self.t)
        r = x[:, :3]
        lit = ~in_earth_shadow(r, self.sun)
        min_el = math.radians(self.inst.min_elevation_deg)
        out = []
        for k, st in enumerate(self.stations):
            if stations is not None and st.name not in stations:
                continue
            cand = self.dark[k] & lit
            idx = np.nonzero(cand)[0]
            if idx.size == 0:
                continue
            el = np.full(self.t.size, -1.0)
            el[idx] = elevation_of(r[idx], self.q[k][idx])
            vis = cand & (el >= min_el)
            for a, b in zip(*_runs(vis)):
                sl = slice(a, b)
                ph = phase_angle(r[sl], self.q[k][sl], self.sun[sl])
                out.append(Pass(obj.id, st, float(self.t[a]), float(self.t[b - 1]),
                                float(el[sl].max()), self.t[sl].copy(), np.atleast_1d(ph),
                                float(self.night_start[k][a])))
        return out


def find_passes(obj: PopulationObject, station: Station, window, step_s: float = 10.0,
                inst: InstrumentModel = InstrumentModel()):
    """Maximal intervals where the object is above the elevation mask, sunlit, and the station dark.

    ``window`` is ``(start_epoch, days)`` with days <= 90.
    """
    start, days = window
    if days > 90:
        raise ValueError("pass windows are limited to 90 days")
    return VisibilityGrid([station], start, days, step_s, inst).passes(obj)


def _best_segment_epoch(p: Pass, fraction: float, cadence_s: float) -> tuple[float, float]:
    """Quantised exposure epoch inside the lowest-phase segment of a pass."""
    nseg = max(1, int(round(1.0 / fraction)))
    edges = np.linspace(p.rise, p.set, nseg + 1)
    best, best_phase = 0, np.inf
    for k in range(nseg):
        sel = (p.epochs >= edges[k]) & (p.epochs <= edges[k + 1])
        if not np.any(sel):
            continue
        m = float(np.mean(p.phases[sel]))
        if m < best_phase:
            best, best_phase = k, m
    mid = 0.5 * (edges[best] + edges[best + 1])
    base = p.night_start if np.isfinite(p.night_start) else p.rise
    slots = (mid - base) * DAY / cadence_s
    k = math.floor(slots + 0.5)
    lo = math.ceil((p.rise - base) * DAY / cadence_s - 1e-6)
    hi = math.floor((p.set - base) * DAY / cadence_s + 1e-6)
    k = min(max(k, lo), hi)
    epoch = base + k * cadence_s / DAY
    phase = float(np.interp(epoch, p.epochs, p.phases))
    return epoch, phase


def _apply_capacity(candidates, log_reason: str):
    groups = defaultdict(list)
    for ex in candidates:
        groups[(ex.station.name, round(ex.epoch * DAY))].append(ex)
    kept = []
    for key in sorted(groups):
        group = sorted(groups[key], key=lambda e: (e.phase, e.target))
        cap = group[0].station.telescopes
        kept.extend(group[:cap])
        for ex in group[cap:]:
            log.debug("%s: dropped %s at %s on %s (all telescopes busy)", log_reason, ex.target,
                     epoch_to_iso(ex.epoch), ex.station.name)
    kept.sort(key=lambda e: (e.epoch, e.station.name, e.target))
    return kept


def schedule_survey(passes, inst: InstrumentModel = InstrumentModel(), fraction: float = 1.0 / 3.0,
                    mode: str = "survey"):
    """One exposure per pass, in the best-phase third, on the cadence grid."""
    cands = []
    for p in passes:
        if p.rise == p.set and p.epochs.size == 1:
            epoch, phase = p.rise, float(p.phases[0])
        else:
            epoch, phase = _best_segment_epoch(p, fraction, inst.cadence_s)
        cands.append(Exposure(p.station, epoch, p.object_id, mode, phase))
    return _apply_capacity(cands, "schedule")


@dataclass
class SurveyResult:
    attributables: list
    truth: list                 # object id per attributable (sidecar; scoring only)
    exposures: list
    misses: Counter
    detections: list = field(default_factory=list, repr=False)


def _synthesize(exposures, objects_by_id, inst, seed, weather=True, image_rates=None):
    detections = []
    misses = Counter()
    half = 0.5 * inst.exposure_s / DAY
    for i, ex in enumerate(exposures):
        obj = objects_by_id[ex.target]
        rate = None if image_rates is None else image_rates[i]
        det = synthesize_observation(obj, ex.station, ex.epoch + half, ex.mode, seed, inst,
                                     weather=weather) if rate is None else \
            synthesize_tasking(obj, ex, inst, seed, rate, weather)
        if det.detected:
            detections.append((det, obj.id))
        else:
            misses[det.reason] += 1
    detections.sort(key=lambda d: (d[0].attributable.epoch, d[0].attributable.station.name, d[1]))
    atts = [d.attributable.with_id(k) for k, (d, _) in enumerate(detections)]
    truth = [oid for _, oid in detections]
    return atts, truth, misses, [d for d, _ in detections]


def synthesize_tasking(obj, ex, inst, seed, image_rate_arcsec, weather=True):
    from dataclasses import replace
    from .observation import snr_trail
    det = synthesize_observation(obj, ex.station, ex.epoch + 0.5 * inst.exposure_s / DAY,
                                 "tasking", seed, inst, weather=weather)
    if not det.detected or image_rate_arcsec <= 0:
        return det
    budget = snr_trail(det.magnitude, image_rate_arcsec, inst)
    if budget.snr_trail < inst.snr_threshold:
        return Detection(None, "snr", budget, det.magnitude, det.phase)
    return replace(det, snr=budget)


def run_survey(population, network, window, seed: int, inst: InstrumentModel = InstrumentModel(),
               mode: str = "survey", step_s: float = 10.0, weather: bool = True, grid=None) -> SurveyResult:
    """Simulate survey observations of a population over ``window = (start, days)``."""
    start, days = window
    grid = grid or VisibilityGrid(network, start, days, step_s, inst)
    fraction = 1.0 / 3.0 if mode == "survey" else 1.0 / 6.0
    passes = []
    for obj in population:
        passes.extend(grid.passes(obj))
    exposures = schedule_survey(passes, inst, fraction, mode)
    by_id = {o.id: o for o in population}
    atts, truth, misses, dets = _synthesize(exposures, by_id, inst, seed, weather)
    log.info("survey: %d passes, %d exposures, %d attributables, misses %s",
             len(passes), len(exposures), len(atts), dict(misses))
    return SurveyResult(atts, truth, exposures, misses, dets)


def schedule_tasking(catalog, window, network, inst: InstrumentModel = InstrumentModel(),
                     horizon_days: float = 7.0, step_s: float = 10.0):
    """Tasking exposures for feasible catalog orbits, in the best-phase sixth of each pass.

    Returns ``(exposures, excluded)`` where ``excluded`` maps orbit ids to the
    reason they need survey instead.
    """
    from .metrics import tasking_feasibility
    from .pipeline import predict_attributable
    start, days = window
    if not catalog:
        return [], {}
    grid = VisibilityGrid(network, start, days, step_s, inst)
    passes, excluded = [], {}
    for orb in catalog:
        feas = tasking_feasibility(orb, horizon_days=max(horizon_days, start + days - orb.epoch),
                                   fov_half_width_arcsec=inst.fov_half_width_arcsec)
        if not feas.passed:
            excluded[orb.id] = "needs-survey"
            continue
        proxy = PopulationObject(orb.id, orb.elements, 1.0)
        passes.extend(grid.passes(proxy))
    exposures = schedule_survey(passes, inst, 1.0 / 6.0, "tasking")
    by_id = {o.id: o for o in catalog}
    out = []
    half = 0.5 * inst.exposure_s / DAY
    for ex in exposures:
        pred, _ = predict_attributable(by_id[ex.target], ex.epoch + half, ex.station)
        out.append(Exposure(ex.station, ex.epoch, ex.target, "tasking", ex.phase, tuple(pred)))
    return out, excluded


def run_tasking(exposures, truth_for_target, seed: int, inst: InstrumentModel = InstrumentModel(),
                weather: bool = True) -> SurveyResult:
    """Synthesize tasking exposures; ``truth_for_target`` maps catalog id -> truth object.

    The image rate is the mismatch between the commanded tracking rate and
    the object's actual motion; the object must also fall inside the field.
    """
    from .observation import light_time_view, topocentric_arrays
    objs = {}
    rates = []
    kept = []
    half = 0.5 * inst.exposure_s / DAY
    for ex in exposures:
        obj = truth_for_target.get(ex.target)
        if obj is None:
            continue
        x, q, qd, _ = light_time_view(obj, ex.station, ex.epoch + half)
        ra, dec, rad, decd, _, _ = topocentric_arrays(x[:3], x[3:], q, qd)
        pra, pdec, prad, pdecd = ex.pointing
        off = math.acos(min(1.0, math.sin(dec) * math.sin(pdec) +
                            math.cos(dec) * math.cos(pdec) * math.cos(ra - pra))) / ARCSEC
        if off > inst.fov_half_width_arcsec:
            continue
        mism = math.hypot((rad - prad) * math.cos(dec), decd - pdecd) / ARCSEC
        objs[obj.id] = obj
        kept.append(Exposure(ex.station, ex.epoch, obj.id, "tasking", ex.phase, ex.pointing))
        rates.append(mism)
    atts, truth, misses, dets = _synthesize(kept, objs, inst, seed, weather, image_rates=rates)
    return SurveyResult(atts, truth, kept, misses, dets)


# --------------------------------------------------------------------------
# attributable stream and truth sidecar

STREAM_FIELDS = ["station", "epoch", "ra_deg", "dec_deg", "ra_rate_deg_per_day", "dec_rate_deg_per_day",
                 "sigma_ra_deg", "sigma_dec_deg", "sigma_ra_rate_deg_per_day", "sigma_dec_rate_deg_per_day",
                 "mode"]


def format_attributables(atts) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STREAM_FIELDS)
    rd = 180.0 / math.pi
    for a in atts:
        s = a.sigmas
        w.writerow([a.station.name, epoch_to_iso(a.epoch), f"{a.ra * rd:.10f}", f"{a.dec * rd:.10f}",
                    f"{a.ra_rate * rd * DAY:.8f}", f"{a.dec_rate * rd * DAY:.8f}",
                    f"{s[0] * rd:.6e}", f"{s[1] * rd:.6e}", f"{s[2] * rd * DAY:.6e}", f"{s[3] * rd * DAY:.6e}",
                    a.mode])
    return buf.getvalue()


def parse_attributables(text: str, stations, source: str = "<attributables>"):
    by_name = {s.name: s for s in stations}
    reader = csv.DictReader(io.StringIO(text))
    missing = [f for f in STREAM_FIELDS if f not in (reader.fieldnames or [])]
    if missing:
        raise FormatError(f"{source}: missing columns {missing}")
    dr = math.pi / 180.0
    out = []
    for lineno, row in enumerate(reader, start=2):
        field = "station"
        try:
            st = by_name.get(row["station"])
            if st is None:
                raise ValueError(f"unknown station {row['station']!r}")
            field = "epoch"
            t = epoch_from_iso(row["epoch"])
            vals = []
            for field in STREAM_FIELDS[2:10]:
                vals.append(float(row[field]))
            field = "mode"
            mode = row["mode"].strip()
            if mode not in ("survey", "tasking"):
                raise ValueError(f"bad mode {mode!r}")
            sig = np.array([vals[4] * dr, vals[5] * dr, vals[6] * dr / DAY, vals[7] * dr / DAY])
            if np.any(sig <= 0):
                field = "sigma"
                raise ValueError("sigmas must be positive")
            att = Attributable(vals[0] * dr, vals[1] * dr, vals[2] * dr / DAY, vals[3] * dr / DAY,
                               t, st, np.diag(sig**2), mode, lineno - 2)
        except (TypeError, ValueError, KeyError) as exc:
            raise FormatError(f"{source}:{lineno}: bad field {field!r}: {exc}") from None
        out.append(att)
    return out


def write_attributables(atts, path) -> None:
    Path(path).write_text(format_attributables(atts))


def load_attributables(path, stations):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"attributable file not found: {path}")
    return parse_attributables(path.read_text(), stations, str(path))


def format_truth(truth) -> str:
    lines = ["index,object_id"] + [f"{k},{oid}" for k, oid in enumerate(truth)]
    return "\n".join(lines) + "\n"


def parse_truth(text: str) -> list:
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for lineno, row in enumerate(reader, start=2):
        if int(row["index"]) != len(out):
            raise FormatError(f"truth sidecar:{lineno}: index out of sequence")
        out.append(row["object_id"])
    return out


def write_truth(truth, path) -> None:
    Path(path).write_text(format_truth(truth))


def load_truth(path) -> list:
    return parse_truth(Path(path).read_text())
