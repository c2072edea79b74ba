"""Truth population objects and the population file format."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .astro import KeplerianElements, epoch_from_iso, epoch_to_iso, kep_to_cart
from .network import FormatError
from .propagation import secular_propagate_array

FIELDS = ["id", "epoch", "a_km", "e", "inc_deg", "raan_deg", "argp_deg", "mean_anomaly_deg",
          "diameter_m", "albedo", "sampling_factor"]


@dataclass(frozen=True)
class PopulationObject:
    id: str
    elements: KeplerianElements
    diameter: float           # m
    albedo: float = 0.1
    sampling_factor: int = 1

    def __post_init__(self):
        if self.diameter <= 0:
            raise ValueError(f"{self.id}: diameter must be positive")
        if self.sampling_factor < 1:
            raise ValueError(f"{self.id}: sampling factor must be >= 1")

    @property
    def perigee_altitude(self) -> float:
        return self.elements.perigee_altitude

    def elements_at(self, t):
        """Secular-propagated element array(s) at epoch(s) ``t`` (days)."""
        dt = (np.asarray(t, dtype=float) - self.elements.epoch) * 86400.0
        return secular_propagate_array(self.elements.as_array(), dt)

    def state_at(self, t):
        """Cartesian truth state(s) (..., 6) at epoch(s) ``t``."""
        return kep_to_cart(self.elements_at(t))


def _row_to_object(row, lineno, source):
    field = "id"
    try:
        oid = row["id"].strip()
        if not oid:
            raise ValueError("empty id")
        field = "epoch"
        epoch = epoch_from_iso(row["epoch"])
        vals = {}
        for field in FIELDS[2:10]:
            vals[field] = float(row[field])
        field = "sampling_factor"
        sf = int(row["sampling_factor"])
        if vals["a_km"] <= 0:
            field = "a_km"
            raise ValueError("semimajor axis must be positive")
        if not 0.0 <= vals["e"] < 1.0:
            field = "e"
            raise ValueError(f"eccentricity {vals['e']} outside [0, 1)")
        if not 0.0 <= vals["inc_deg"] <= 180.0:
            field = "inc_deg"
            raise ValueError("inclination outside [0, 180] deg")
        el = KeplerianElements(vals["a_km"], vals["e"], math.radians(vals["inc_deg"]),
                               math.radians(vals["raan_deg"]) % (2 * math.pi),
                               math.radians(vals["argp_deg"]) % (2 * math.pi),
                               math.radians(vals["mean_anomaly_deg"]) % (2 * math.pi), epoch)
        return PopulationObject(oid, el, vals["diameter_m"], vals["albedo"], sf)
    except (TypeError, ValueError, KeyError) as exc:
        raise FormatError(f"{source}:{lineno}: bad field {field!r}: {exc}") from None


def parse_population(text: str, source: str = "<population>") -> list[PopulationObject]:
    reader = csv.DictReader(io.StringIO(text))
    missing = [f for f in FIELDS if f not in (reader.fieldnames or [])]
    if missing:
        raise FormatError(f"{source}: missing columns {missing}")
    objects, seen = [], set()
    for lineno, row in enumerate(reader, start=2):
        obj = _row_to_object(row, lineno, source)
        if obj.id in seen:
            raise FormatError(f"{source}:{lineno}: duplicate id {obj.id!r}")
        seen.add(obj.id)
        objects.append(obj)
    return objects


def load_population(path) -> list[PopulationObject]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"population file not found: {path}")
    return parse_population(path.read_text(), str(path))


def format_population(objects) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDS)
    for o in objects:
        el = o.elements
        w.writerow([o.id, epoch_to_iso(el.epoch), f"{el.a:.9f}", f"{el.e:.12f}",
                    f"{math.degrees(el.inc):.10f}", f"{math.degrees(el.raan):.10f}",
                    f"{math.degrees(el.argp):.10f}", f"{math.degrees(el.mean_anomaly):.10f}",
                    f"{o.diameter:.6f}", f"{o.albedo:.4f}", o.sampling_factor])
    return buf.getvalue()


def write_population(objects, path) -> None:
    Path(path).write_text(format_population(objects))
