import json

import pytest

from debriscat.cli import main
from debriscat.pipeline import load_catalog
from debriscat.scenario import ScenarioError, load_scenario
from debriscat.survey import load_truth

MINIMAL = """\
[scenario]
mode = build-up
synthetic_objects = 5
days = 3
seed = 3
"""


def write_config(tmp_path, text=MINIMAL, name="scenario.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


@pytest.fixture(scope="module")
def buildup(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp)
    outs = []
    for k in range(2):
        out = tmp / f"run{k}"
        assert main(["build-up", "--config", str(cfg), "--out", str(out)]) == 0
        outs.append(out)
    return outs


def test_scenario_defaults_by_mode():
    assert load_scenario(mode="build-up").days == 14.0
    frag = load_scenario(mode="fragmentation")
    assert frag.days == 5.0 and frag.max_link_pairs > 0
    assert load_scenario(mode="tasking", days=2.0).days == 2.0


@pytest.mark.parametrize("text, field", [
    ("[scenario]\ndays = -1\n", "days"),
    ("[scenario]\nseed = many\n", "seed"),
    ("[scenario]\nweather = maybe\n", "weather"),
    ("[scenario]\nmode = orbit\n", "mode"),
    ("[thresholds]\nchi_maximum = 3\n", "chi_maximum"),
    ("[extras]\nx = 1\n", "extras"),
])
def test_config_errors_name_the_field(tmp_path, text, field):
    with pytest.raises(ScenarioError, match=field):
        load_scenario(write_config(tmp_path, text))


def test_relative_paths_resolve_against_config(tmp_path):
    (tmp_path / "pop.csv").write_text("")
    sc = load_scenario(write_config(tmp_path, "[scenario]\npopulation = pop.csv\n"))
    assert sc.population == str(tmp_path / "pop.csv")


def test_missing_population_exit_code(tmp_path, capsys):
    missing = tmp_path / "nowhere.csv"
    assert main(["build-up", "--population", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_missing_config_exit_code(tmp_path, capsys):
    assert main(["tasking", "--config", str(tmp_path / "none.ini")]) == 2
    assert "config" in capsys.readouterr().err


def test_minimal_buildup(buildup):
    out = buildup[0]
    assert not (out / "INCOMPLETE").exists()
    cat = load_catalog(out / "catalog.jsonl")
    assert any(o.status in ("reliable", "numbered") for o in cat)
    assert (out / "summary.txt").read_text().startswith("build-up: 5 objects")


def test_buildup_deterministic(buildup):
    a, b = buildup
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n


def test_report_command(buildup, capsys):
    out = buildup[0]
    assert main(["report", str(out / "catalog.jsonl"), str(out / "truth.csv"),
                 "--population", str(out / "population.csv")]) == 0
    assert capsys.readouterr().out == (out / "efficiency.csv").read_text()


def test_report_missing_file(buildup, capsys):
    out = buildup[0]
    assert main(["report", str(out / "nope.jsonl"), str(out / "truth.csv"),
                 "--population", str(out / "population.csv")]) == 2
    assert "nope.jsonl" in capsys.readouterr().err


def _same_object_pair(out):
    truth = load_truth(out / "truth.csv")
    first = {}
    for i, oid in enumerate(truth):
        if oid in first and i - first[oid] > 3:
            return first[oid], i
        first.setdefault(oid, i)
    raise AssertionError("no pair in the stream")


def test_link_command(buildup, capsys):
    out = buildup[0]
    i, j = _same_object_pair(out)
    assert main(["link", str(out / "attributables.csv"), "--pair", str(i), str(j)]) == 0
    text = capsys.readouterr().out
    assert text.startswith("candidate 0: chi") and " a " in text
    assert main(["link", str(out / "attributables.csv"), "--pair", "0", "99999"]) == 2


def test_fit_command(buildup, tmp_path, capsys):
    out = buildup[0]
    truth = load_truth(out / "truth.csv")
    lines = (out / "attributables.csv").read_text().splitlines()
    owner = max(set(truth), key=truth.count)
    keep = [lines[0]] + [lines[1 + k] for k, oid in enumerate(truth) if oid == owner]
    (tmp_path / "one.csv").write_text("\n".join(keep) + "\n")
    assert main(["fit", str(tmp_path / "one.csv")]) == 0
    record = capsys.readouterr().out.splitlines()[-1]
    assert json.loads(record)["trails"]

    (tmp_path / "single.csv").write_text("\n".join(keep[:2]) + "\n")
    assert main(["fit", str(tmp_path / "single.csv")]) == 2
    assert "underdetermined" in capsys.readouterr().err


def test_bad_attributable_file(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("garbage\n1,2,3\n")
    assert main(["fit", str(tmp_path / "bad.csv")]) == 2
    assert "bad.csv" in capsys.readouterr().err


def test_inline_comments_allowed(tmp_path):
    sc = load_scenario(write_config(tmp_path, "[scenario]\nmode = tasking   ; or build-up\ndays = 4  # short\n"))
    assert sc.mode == "tasking" and sc.days == 4.0
