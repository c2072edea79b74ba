import math

import pytest

from debriscat.astro import KeplerianElements
from debriscat.network import FormatError, load_network, write_network
from debriscat.population import (PopulationObject, format_population, load_population, parse_population,
                                  write_population)
from debriscat.synthetic import random_population


def test_bundled_network():
    net = load_network()
    assert len(net) == 7
    assert len({s.name for s in net}) == 7
    assert all(0.0 <= s.cloud_probability <= 1.0 for s in net)


def test_network_round_trip(tmp_path):
    net = load_network()
    p = tmp_path / "net.csv"
    write_network(net, p)
    back = load_network(p)
    assert [s.name for s in back] == [s.name for s in net]
    assert all(math.isclose(a.lat, b.lat, abs_tol=1e-9) for a, b in zip(back, net))


def test_network_errors_name_line(tmp_path):
    p = tmp_path / "net.csv"
    p.write_text("name,latitude_deg,longitude_deg,height_m,cloud_probability\nA,10,20,0,0.1\nB,ten,20,0,0.1\n")
    with pytest.raises(FormatError, match=r"net.csv:3: bad field 'latitude_deg'"):
        load_network(p)
    p.write_text("name,latitude_deg,longitude_deg,height_m,cloud_probability\nA,10,20,0,0.1\nA,11,20,0,0.1\n")
    with pytest.raises(FormatError, match="duplicate"):
        load_network(p)
    p.write_text("name,latitude_deg\nA,1\n")
    with pytest.raises(FormatError, match="missing columns"):
        load_network(p)
    with pytest.raises(FileNotFoundError):
        load_network(tmp_path / "none.csv")


def test_population_round_trip(tmp_path):
    pop = random_population(12, 3)
    p = tmp_path / "pop.csv"
    write_population(pop, p)
    back = load_population(p)
    assert format_population(back) == format_population(pop)
    for a, b in zip(pop, back):
        assert a.id == b.id and a.diameter == b.diameter
        assert a.elements.a == pytest.approx(b.elements.a, rel=1e-12)


def test_population_errors():
    good = format_population(random_population(2, 1))
    header, row1, row2 = good.strip().splitlines()
    with pytest.raises(FormatError, match=":2: bad field 'e'"):
        bad = row1.split(",")
        bad[3] = "1.5"
        parse_population("\n".join([header, ",".join(bad)]))
    with pytest.raises(FormatError, match="duplicate id"):
        parse_population("\n".join([header, row1, row1]))
    with pytest.raises(FormatError, match="missing columns"):
        parse_population("id,epoch\nX,2000-01-01T12:00:00\n")


def test_population_object_validation():
    el = KeplerianElements(7000.0, 0.0, 1.0, 0, 0, 0, 0.0)
    with pytest.raises(ValueError):
        PopulationObject("X", el, 0.0)
    with pytest.raises(ValueError):
        PopulationObject("X", el, 0.1, sampling_factor=0)


def test_synthetic_population_ranges():
    pop = random_population(200, 9)
    assert all(1300.0 - 1e-6 <= o.perigee_altitude <= 2000.0 for o in pop)
    assert all(0.08 <= o.diameter <= 0.27 for o in pop)
    assert all(o.elements.a < 6378.137 + 2000.0 for o in pop)
    assert format_population(pop) == format_population(random_population(200, 9))
