import math

import numpy as np
import pytest

from debriscat.astro import R_EARTH
from debriscat.fragmentation import (COLLISION, EXPLOSION, Fragment, FragmentationEvent, cloud_population,
                                     core_fragments, cumulative_count, default_parent, detection_timeline,
                                     format_gabbard, format_timeline, gabbard, gabbard_branch_correlations,
                                     generate_fragments, is_catastrophic, load_breakup_constants, specific_energy,
                                     state_to_elements, with_states)
from debriscat.pipeline import PipelineConfig

PARENT = default_parent()


def explosion(seed=1, **kw):
    return FragmentationEvent(EXPLOSION, PARENT, seed=seed, **kw)


def collision(seed=1, **kw):
    return FragmentationEvent(COLLISION, PARENT, 1000.0, 10.0, 9.0, seed=seed, **kw)


def test_specific_energy_reference_case():
    assert specific_energy(10.0, 9.0, 1000.0) == 405000.0
    assert is_catastrophic(10.0, 9.0, 1000.0)


def test_catastrophic_threshold_inclusive():
    assert specific_energy(8.0, 2.0, 400.0) == 40000.0
    assert is_catastrophic(8.0, 2.0, 400.0)
    assert not is_catastrophic(8.0, 1.999, 400.0)
    with pytest.raises(ValueError):
        specific_energy(0.0, 1.0, 1.0)


def test_expected_counts():
    assert float(cumulative_count(explosion(), 0.1)) == pytest.approx(6.0 * 0.1 ** -1.6)
    assert float(cumulative_count(collision(), 0.1)) == pytest.approx(0.1 * 1010.0 ** 0.75 * 0.1 ** -1.71)


def test_generated_counts_in_range():
    ex = [len(generate_fragments(explosion(s))) for s in range(10)]
    co = [len(generate_fragments(collision(s))) for s in range(5)]
    assert all(200 <= n <= 280 for n in ex)
    assert all(780 <= n <= 1100 for n in co)


def test_size_distribution_follows_power_law():
    L = np.concatenate([[f.size for f in generate_fragments(explosion(s))] for s in range(20)])
    assert L.min() >= 0.1
    # maximum-likelihood exponent of a Pareto tail above the cutoff
    beta = L.size / np.sum(np.log(L / 0.1))
    assert beta == pytest.approx(1.6, rel=0.05)


def test_delta_v_law():
    c = load_breakup_constants()["delta_v"]
    frags = [f for s in range(5) for f in generate_fragments(explosion(s))]
    chi = np.log10([f.area_to_mass for f in frags])
    resid = np.log10([f.dv_norm for f in frags]) - (c["explosion_slope"] * chi + c["explosion_offset"])
    assert abs(resid.mean()) < 0.05
    assert resid.std() == pytest.approx(0.4, rel=0.1)
    assert all(f.mass > 0 for f in frags)


def test_non_catastrophic_collision_rejected():
    ev = FragmentationEvent(COLLISION, PARENT, 1000.0, 0.01, 1.0)
    with pytest.raises(ValueError, match="non-catastrophic"):
        generate_fragments(ev)


def test_event_validation():
    with pytest.raises(ValueError):
        FragmentationEvent("implosion", PARENT)
    with pytest.raises(ValueError):
        FragmentationEvent(COLLISION, PARENT, 1000.0)
    with pytest.raises(ValueError):
        FragmentationEvent(EXPLOSION, PARENT, size_cutoff=0.0)


def test_determinism():
    a = generate_fragments(explosion(4))
    b = generate_fragments(explosion(4))
    assert [(f.id, f.size, f.mass) for f in a] == [(f.id, f.size, f.mass) for f in b]
    assert [f.size for f in generate_fragments(explosion(5))] != [f.size for f in a]


def test_fragment_states_and_reentry():
    slow = Fragment("S", 0.2, 0.1, 1.0, np.array([0.0, 5.0, 0.0]))
    brake = Fragment("B", 0.2, 0.1, 1.0, -PARENT.v / np.linalg.norm(PARENT.v) * 900.0)
    s, b = with_states(PARENT, [slow, brake])
    assert not s.reentering and b.reentering
    assert abs(s.elements.a - (R_EARTH + 1400.0)) < 20.0


def test_core_selection():
    frags = generate_fragments(explosion(2))
    core = core_fragments(frags, 100.0)
    assert core and all(f.dv_norm < 100.0 for f in core)
    assert len(core) < len(frags)


def test_gabbard_x_shape():
    core = with_states(PARENT, core_fragments(generate_fragments(explosion(1))))
    rows = gabbard([f.elements for f in core])
    pe = state_to_elements(PARENT)
    p0 = gabbard([pe])[0]
    assert p0[1] == pytest.approx(1400.0, abs=1e-6) and p0[2] == pytest.approx(1400.0, abs=1e-6)
    up, down = gabbard_branch_correlations(rows, p0[0], p0[1])
    assert up > 0.9 and down > 0.9
    text = format_gabbard([f.id for f in core], rows)
    assert text.count("\n") == len(core) + 1


def test_cloud_population_matches_core():
    ev = explosion(3)
    pop = cloud_population(ev)
    core = core_fragments(generate_fragments(ev), ev.dv_cutoff)
    assert 0 < len(pop) <= len(core)
    assert all(o.perigee_altitude > 200.0 for o in pop)


def test_detection_timeline_small_cloud(network):
    pop = cloud_population(explosion(1))[:15]
    rows, res, dc = detection_timeline(explosion(1), network, (0.0, 2.0), 11, pop, weather=False,
                                       config=PipelineConfig(max_link_pairs=500))
    assert [r.day for r in rows] == [1, 2]
    assert rows[0].fraction_detected <= rows[1].fraction_detected <= 1.0
    assert rows[1].fraction_detected >= 0.9
    assert all(r.mixed == 0 for r in rows)
    assert dc.check_op_order()
    text = format_timeline(rows)
    assert text.splitlines()[0].startswith("day,fraction_detected")
