"""Campaign runner: build-up, tasking and fragmentation scenarios from an INI file."""
from __future__ import annotations

import collections
import configparser
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import fragmentation as frag
from .astro import ARCSEC, R_EARTH
from .metrics import (ENHANCED_RADAR, BASELINE_RADAR, AccuracyRecord, classify, efficiency_report, envelope_for,
                      envelope_norm, feasibility_bounds, format_accuracy, format_norms, format_rows, parse_rows)
from .network import load_network
from .observation import load_instrument
from .pipeline import DataCenter, PipelineConfig, format_catalog, parse_catalog, propagate_orbit
from .population import format_population, load_population, parse_population
from .survey import format_attributables, format_truth, parse_attributables, parse_truth, run_survey, \
    run_tasking, schedule_tasking
from .synthetic import random_population

log = logging.getLogger(__name__)

MODES = ("build-up", "tasking", "fragmentation")
# A dense cloud yields millions of prefiltered pairs per day that all look alike;
# linking a bounded sample, ranked by phase consistency, keeps a day
# near two minutes while still finding every fragment within a few days.
FRAGMENTATION_PAIR_BUDGET = 10000


class ScenarioError(ValueError):
    """Invalid scenario configuration; the message names the offending field."""


@dataclass(frozen=True)
class Scenario:
    mode: str = "build-up"
    population: Optional[str] = None        # population file; None draws a synthetic one
    synthetic_objects: int = 50
    network: Optional[str] = None           # None: bundled seven-station network
    instrument: Optional[str] = None        # None: bundled instrument model
    start: float = 0.0                      # days from J2000
    days: Optional[float] = None            # None: 14 (build-up, tasking) or 5 (fragmentation)
    seed: int = 1
    weather: bool = True
    out: str = "out"
    # thresholds
    chi_max: float = 5.0
    chi_attr_max: float = 5.0
    rms_gate: float = 3.0
    reliable_trails: int = 5
    numbering_trails: int = 10
    link_window_days: float = 3.0
    max_link_pairs: Optional[int] = None    # None: unlimited, or FRAGMENTATION_PAIR_BUDGET for a cloud
    model: str = "secular"
    # tasking
    tasking_days: float = 21.0
    horizon_days: float = 7.0
    # fragmentation
    kind: str = "explosion"
    target_mass_kg: float = 1000.0
    projectile_mass_kg: float = 10.0
    impact_speed_km_s: float = 9.0
    size_cutoff_m: float = 0.10
    dv_cutoff_m_per_s: float = 100.0
    parent_altitude_km: float = 1400.0
    parent_inclination_deg: float = 74.0
    breakup_config: Optional[str] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ScenarioError(f"mode: must be one of {', '.join(MODES)} (got {self.mode!r})")
        if self.days is None:
            object.__setattr__(self, "days", 5.0 if self.mode == "fragmentation" else 14.0)
        if self.max_link_pairs is None:
            object.__setattr__(self, "max_link_pairs",
                               FRAGMENTATION_PAIR_BUDGET if self.mode == "fragmentation" else 0)
        if self.max_link_pairs < 0:
            raise ScenarioError("max_link_pairs: must be >= 0 (0 means unlimited)")
        if not self.days > 0:
            raise ScenarioError("days: must be positive")
        if self.mode == "tasking" and not self.tasking_days > 0:
            raise ScenarioError("tasking_days: must be positive")
        if self.synthetic_objects < 1:
            raise ScenarioError("synthetic_objects: must be at least 1")
        for name in ("population", "network", "instrument", "breakup_config"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise ScenarioError(f"{name}: file not found: {p}")
        if self.kind not in (frag.EXPLOSION, frag.COLLISION):
            raise ScenarioError(f"kind: must be explosion or collision (got {self.kind!r})")
        if self.model not in ("secular", "numerical"):
            raise ScenarioError(f"model: must be secular or numerical (got {self.model!r})")

    @property
    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(chi_max=self.chi_max, chi_attr_max=self.chi_attr_max, rms_gate=self.rms_gate,
                              reliable_trails=self.reliable_trails, numbering_trails=self.numbering_trails,
                              link_window_days=self.link_window_days, max_link_pairs=self.max_link_pairs,
                              model=self.model)


SECTIONS = {
    "scenario": ("mode", "population", "synthetic_objects", "network", "instrument", "start", "days", "seed",
                 "weather", "out", "model"),
    "thresholds": ("chi_max", "chi_attr_max", "rms_gate", "reliable_trails", "numbering_trails",
                   "link_window_days", "max_link_pairs"),
    "tasking": ("tasking_days", "horizon_days"),
    "fragmentation": ("kind", "target_mass_kg", "projectile_mass_kg", "impact_speed_km_s", "size_cutoff_m",
                      "dv_cutoff_m_per_s", "parent_altitude_km", "parent_inclination_deg", "breakup_config"),
}
_TYPES = {f.name: f.type for f in fields(Scenario)}


def _convert(name: str, raw: str):
    kind = _TYPES[name].removeprefix("Optional[").rstrip("]")
    try:
        if kind == "bool":
            v = raw.strip().lower()
            if v not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(f"not a boolean: {raw!r}")
            return v in ("1", "true", "yes", "on")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw.strip() or None
    except ValueError as exc:
        raise ScenarioError(f"{name}: {exc}") from None


def load_scenario(path=None, **overrides) -> Scenario:
    """Scenario from an INI file (sections scenario, thresholds, tasking, fragmentation) plus overrides.

    Relative file paths in the config are resolved against its directory.
    """
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ScenarioError(f"config: file not found: {path}")
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ScenarioError(f"config: {exc}") from None
        for sec in cp.sections():
            if sec not in SECTIONS:
                raise ScenarioError(f"config: unknown section [{sec}]")
            for key, raw in cp.items(sec):
                if key not in SECTIONS[sec]:
                    raise ScenarioError(f"[{sec}] {key}: unknown key")
                values[key] = _convert(key, raw)
        for key in ("population", "network", "instrument", "breakup_config"):
            if values.get(key) and not Path(values[key]).is_absolute():
                values[key] = str(path.parent / values[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return Scenario(**values)


# --------------------------------------------------------------------------
# campaign helpers

@dataclass
class CampaignResult:
    scenario: Scenario
    outputs: dict = field(default_factory=dict)     # name -> path
    summary: str = ""
    data: dict = field(default_factory=dict)        # in-memory results for callers


def _population(sc: Scenario):
    if sc.population:
        return load_population(sc.population)
    return random_population(sc.synthetic_objects, sc.seed, epoch=sc.start)


def _daily(dc: DataCenter, atts, start: float, days: float, label0: int = 0):
    for d in range(int(math.ceil(days))):
        lo, hi = start + d, start + d + 1
        batch = [a for a in atts if lo <= a.epoch < hi]
        if batch:
            dc.ingest(batch, label=label0 + d)


def _owner(orbit, truth: dict):
    """Object id owning every trail of an orbit, else None."""
    ids = {truth[t] for t in orbit.trails}
    return ids.pop() if len(ids) == 1 else None


def _write(out: Path, name: str, text: str, outputs: dict):
    p = out / name
    p.write_text(text)
    outputs[name] = str(p)


def build_up(sc: Scenario, pop, network, inst):
    """Survey the population for ``sc.days`` and process it day by day."""
    res = run_survey(pop, network, (sc.start, sc.days), sc.seed, inst, weather=sc.weather)
    dc = DataCenter(sc.pipeline_config)
    _daily(dc, res.attributables, sc.start, sc.days)
    if not dc.check_op_order():
        raise RuntimeError("attribution did not precede linkage in every batch")
    return res, dc


def tasking(sc: Scenario, pop, network, inst, dc: DataCenter, atts: list, truth: list):
    """Daily tasking on the current catalog; appends to ``atts`` and ``truth`` in place."""
    by_id = {o.id: o for o in pop}
    t0 = sc.start + sc.days
    for d in range(int(math.ceil(sc.tasking_days))):
        tmap = dict(enumerate(truth))
        cat = [c.orbit for c in dc.correlations if len(c.trails) >= 3]
        # the simulated sky decides which object a commanded pointing actually finds
        target = {}
        for o in cat:
            c = collections.Counter(tmap[t] for t in o.trails).most_common(1)[0][0]
            target[o.id] = by_id[c]
        ex, _ = schedule_tasking(cat, (t0 + d, 1.0), network, inst, sc.horizon_days)
        res = run_tasking(ex, target, sc.seed * 1000 + d, inst, weather=sc.weather)
        base = len(atts)
        new = [a.with_id(base + k) for k, a in enumerate(res.attributables)]
        atts.extend(new)
        truth.extend(res.truth)
        if new:
            dc.ingest(new, label=int(sc.days) + d)
    if not dc.check_op_order():
        raise RuntimeError("attribution did not precede linkage in every batch")


def accuracy_records(dc: DataCenter, truth, pop, horizon_days: float = 7.0, status: str = "numbered"):
    """Envelope norms after propagating each orbit ``horizon_days`` past its last trail."""
    tmap = truth if isinstance(truth, dict) else dict(enumerate(truth))
    by_id = {o.id: o for o in pop}
    recs = []
    for c in dc.correlations:
        orb = c.orbit
        if orb.status != status:
            continue
        owner = _owner(orb, tmap)
        last = max(dc.store[t].epoch for t in c.trails)
        end = propagate_orbit(orb, last + horizon_days, dc.model)
        el = end.elements
        cls = classify(by_id[owner].elements) if owner else classify(el)
        pn, vn = envelope_norm(end.covariance, end.state, envelope_for(cls))
        ang, _, _, _ = feasibility_bounds(end.covariance, end.state, el.a * (1 - el.e) - R_EARTH)
        if owner:
            tr = by_id[owner].state_at(np.array([end.epoch]))[0]
            rel = float(np.linalg.norm(tr[3:] - end.state[3:]) / np.linalg.norm(tr[3:]))
        else:
            rel = float("inf")
        recs.append(AccuracyRecord(owner or "MIXED", orb.id, cls, pn, vn, ang / ARCSEC, rel))
    return recs


def _efficiency_text(report) -> str:
    return format_rows(report.table())


def _validate(outputs: dict, network):
    """Re-parse every output with its own parser."""
    for name, path in outputs.items():
        text = Path(path).read_text()
        if name.endswith(".jsonl"):
            parse_catalog(text, path)
        elif name == "attributables.csv":
            parse_attributables(text, network, path)
        elif name == "truth.csv":
            parse_truth(text)
        elif name == "population.csv":
            parse_population(text, path)
        elif name.endswith(".csv"):
            rows = parse_rows(text)
            if not rows or len({len(r) for r in rows}) != 1:
                raise RuntimeError(f"{path}: ragged table")


def run_scenario(sc: Scenario) -> CampaignResult:
    """Run a campaign end to end and write its outputs into ``sc.out``."""
    out = Path(sc.out)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "INCOMPLETE"
    marker.write_text("campaign did not finish; outputs in this directory are partial\n")
    network = load_network(sc.network)
    inst = load_instrument(sc.instrument)
    result = CampaignResult(sc)
    outputs = result.outputs
    if sc.mode == "fragmentation":
        _run_fragmentation(sc, network, inst, result)
    else:
        pop = _population(sc)
        res, dc = build_up(sc, pop, network, inst)
        atts, truth = list(res.attributables), list(res.truth)
        report = efficiency_report([c.orbit for c in dc.correlations], truth, pop, (ENHANCED_RADAR, BASELINE_RADAR))
        _write(out, "efficiency.csv", _efficiency_text(report), outputs)
        lines = [f"build-up: {len(pop)} objects, {len(atts)} attributables, "
                 f"{len(report.cataloged)} objects cataloged with >= 3 trails, "
                 f"{len(report.mixed)} mixed orbits",
                 _efficiency_text(report)]
        result.data.update(population=pop, build_up=dc, efficiency=report)
        if sc.mode == "tasking":
            tasking(sc, pop, network, inst, dc, atts, truth)
            recs = accuracy_records(dc, truth, pop, sc.horizon_days)
            _write(out, "accuracy.csv", format_accuracy(recs), outputs)
            _write(out, "norms.csv", format_norms(recs), outputs)
            lines.append(f"tasking: {sc.tasking_days:g} days, {len(atts)} attributables in total")
            lines.append(format_accuracy(recs))
            result.data.update(accuracy=recs)
        _write(out, "population.csv", format_population(pop), outputs)
        _write(out, "attributables.csv", format_attributables(atts), outputs)
        _write(out, "truth.csv", format_truth(truth), outputs)
        _write(out, "catalog.jsonl", format_catalog([c.orbit for c in dc.correlations]), outputs)
        result.data.update(data_center=dc, attributables=atts, truth=truth)
        result.summary = "\n".join(lines)
    _write(out, "summary.txt", result.summary + "\n", outputs)
    _validate(outputs, network)
    marker.unlink()
    return result


def _run_fragmentation(sc: Scenario, network, inst, result: CampaignResult):
    out = Path(sc.out)
    outputs = result.outputs
    constants = frag.load_breakup_constants(sc.breakup_config)
    parent = frag.default_parent(sc.start, sc.parent_altitude_km, sc.parent_inclination_deg)
    event = frag.FragmentationEvent(sc.kind, parent, sc.target_mass_kg,
                                    sc.projectile_mass_kg if sc.kind == frag.COLLISION else 0.0,
                                    sc.impact_speed_km_s if sc.kind == frag.COLLISION else 0.0,
                                    sc.size_cutoff_m, sc.dv_cutoff_m_per_s, sc.seed)
    all_frags = frag.generate_fragments(event, constants)
    core = frag.with_states(parent, frag.core_fragments(all_frags, sc.dv_cutoff_m_per_s))
    pop = [frag.PopulationObject(f.id, f.elements, round(f.size, 4)) for f in core if not f.reentering]
    rows, res, dc = frag.detection_timeline(event, network, (sc.start, sc.days), sc.seed, pop, inst,
                                            sc.weather, sc.pipeline_config)
    if not dc.check_op_order():
        raise RuntimeError("attribution did not precede linkage in every batch")
    g = frag.gabbard([f.elements for f in core])
    pg = frag.gabbard([frag.state_to_elements(parent)])[0]
    corr = frag.gabbard_branch_correlations(g, pg[0], pg[1])
    _write(out, "gabbard.csv", frag.format_gabbard([f.id for f in core], g), outputs)
    cat = [c.orbit for c in dc.correlations if len(c.trails) >= sc.reliable_trails]
    _write(out, "gabbard_catalog.csv",
           frag.format_gabbard([o.id for o in cat], frag.gabbard([o.elements for o in cat])), outputs)
    _write(out, "timeline.csv", frag.format_timeline(rows), outputs)
    _write(out, "population.csv", format_population(pop), outputs)
    _write(out, "attributables.csv", format_attributables(res.attributables), outputs)
    _write(out, "truth.csv", format_truth(res.truth), outputs)
    _write(out, "catalog.jsonl", format_catalog([c.orbit for c in dc.correlations]), outputs)
    result.summary = "\n".join([
        f"fragmentation ({sc.kind}): {len(all_frags)} fragments >= {sc.size_cutoff_m:g} m, "
        f"{len(core)} with dv < {sc.dv_cutoff_m_per_s:g} m/s, {len(pop)} orbiting",
        f"Gabbard branch correlations: {corr[0]:.3f} (above), {corr[1]:.3f} (below)",
        frag.format_timeline(rows).rstrip()])
    result.data.update(event=event, fragments=all_frags, core=core, population=pop, timeline=rows,
                       data_center=dc, attributables=res.attributables, truth=res.truth, gabbard=corr)
