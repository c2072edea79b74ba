"""Station network file: one CSV row per station."""
from __future__ import annotations

import csv
import io
import math
from importlib import resources
from pathlib import Path

from .astro import Station

FIELDS = ["name", "latitude_deg", "longitude_deg", "height_m", "cloud_probability", "telescopes"]


class FormatError(ValueError):
    """A data file row could not be parsed; the message names line and field."""


def _parse_rows(text: str, source: str) -> list[Station]:
    reader = csv.DictReader(io.StringIO(text))
    missing = [f for f in FIELDS[:5] if f not in (reader.fieldnames or [])]
    if missing:
        raise FormatError(f"{source}: missing columns {missing}")
    stations = []
    names = set()
    for lineno, row in enumerate(reader, start=2):
        try:
            field = "name"
            name = row["name"].strip()
            field = "latitude_deg"
            lat = float(row["latitude_deg"])
            field = "longitude_deg"
            lon = float(row["longitude_deg"])
            field = "height_m"
            height = float(row["height_m"])
            field = "cloud_probability"
            cloud = float(row["cloud_probability"])
            field = "telescopes"
            scopes = int(row.get("telescopes") or 3)
            station = Station(name, math.radians(lat), math.radians(lon), height, cloud, scopes)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{source}:{lineno}: bad field {field!r}: {exc}") from None
        if name in names:
            raise FormatError(f"{source}:{lineno}: duplicate station {name!r}")
        names.add(name)
        stations.append(station)
    return stations


def load_network(path=None) -> list[Station]:
    """Read a network file; ``None`` loads the bundled seven-station network."""
    if path is None:
        text = resources.files("debriscat.data").joinpath("network.csv").read_text()
        return _parse_rows(text, "network.csv")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"network file not found: {path}")
    return _parse_rows(path.read_text(), str(path))


def write_network(stations, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIELDS)
        for s in stations:
            w.writerow([s.name, f"{math.degrees(s.lat):.8f}", f"{math.degrees(s.lon):.8f}",
                        f"{s.height:g}", f"{s.cloud_probability:g}", s.telescopes])
