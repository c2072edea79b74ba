import math
from dataclasses import replace

import numpy as np
import pytest

from debriscat.astro import DAY
from debriscat.linkage import link_j2
from debriscat.pipeline import (_fit_epoch, Correlation, DataCenter, FitError, NumericalModel, OrbitEstimate, PipelineConfig,
                                SecularModel, attribute, canonical_trails, differential_correction,
                                estimate_from_candidate, fit_is_good, format_catalog, get_model,
                                manage_correlations, mahalanobis, parse_catalog, predict_attributable,
                                propagate_orbit)
from debriscat.survey import run_survey
from debriscat.synthetic import make_attributable, random_population, visible_epochs

CFG = PipelineConfig()


def _track(obj, network, n, rng=None, start=0.0, days=6.0, sigma=0.4):
    """n attributables of obj on distinct passes (at least 0.05 d apart)."""
    out, last = [], -1.0
    for t, st in visible_epochs(obj, network, start, start + days, 120.0 / 86400.0):
        if t - last > 0.05:
            out.append(make_attributable(obj, st, t, sigma, rng).with_id(len(out)))
            last = t
        if len(out) == n:
            break
    assert len(out) == n
    return out


@pytest.fixture(scope="module")
def objects():
    return random_population(3, 17)


def _prelim(obj, atts, dx=(1.0, -0.5, 0.3, 1e-3, -5e-4, 2e-4)):
    x = obj.state_at(atts[0].epoch) + np.array(dx)
    return OrbitEstimate("T", atts[0].epoch, x, np.eye(6))


def test_noiseless_fit_recovers_truth(objects, network):
    obj = objects[0]
    atts = _track(obj, network, 6)
    fit = differential_correction(_prelim(obj, atts), atts, CFG)
    assert fit.converged and fit_is_good(fit, CFG)
    truth = obj.state_at(fit.epoch)
    assert np.linalg.norm(fit.state[:3] - truth[:3]) < 1e-5
    assert fit.rms < 1e-3
    assert fit.status == "reliable"
    assert fit.epoch == atts[0].epoch
    moved = differential_correction(_prelim(obj, atts), atts, CFG, epoch=_fit_epoch(atts))
    assert moved.epoch == pytest.approx(atts[-1].epoch, abs=1e-3 / DAY)
    assert np.linalg.norm(moved.state[:3] - obj.state_at(moved.epoch)[:3]) < 1e-5


def test_noisy_fit_statistics(objects, network):
    obj = objects[1]
    rng = np.random.default_rng(8)
    atts = _track(obj, network, 10, rng)
    fit = differential_correction(_prelim(obj, atts), atts, CFG)
    assert fit_is_good(fit, CFG) and fit.status == "numbered"
    assert 0.3 < fit.nrms < 1.7
    err = fit.state - obj.state_at(fit.epoch)
    assert err @ np.linalg.solve(fit.covariance, err) < 30.0      # chi-square, 6 dof


def test_fit_needs_two_observations(objects, network):
    atts = _track(objects[0], network, 2)
    with pytest.raises(FitError):
        differential_correction(_prelim(objects[0], atts), atts[:1], CFG)


def test_outlier_is_flagged(objects, network):
    obj = objects[0]
    atts = _track(obj, network, 8)
    bad = replace(atts[4], dec=atts[4].dec + 200 * math.sqrt(atts[4].covariance[1, 1]))
    atts[4] = bad
    fit = differential_correction(_prelim(obj, atts), atts, CFG)
    assert not fit_is_good(fit, CFG)


def test_prediction_and_attribution(objects, network):
    obj, other = objects[0], objects[2]
    atts = _track(obj, network, 7)
    orb = differential_correction(_prelim(obj, atts[:6]), atts[:6], CFG)
    pred, cov = predict_attributable(orb, atts[6].epoch, atts[6].station)
    assert np.all(np.linalg.eigvalsh(cov) > 0)
    assert abs(pred[1] - atts[6].dec) < 1e-6
    res = attribute(orb, atts[6], observations=atts[:6], config=CFG)
    assert res.accepted and res.distance < 1.0 and res.orbit.n_trails == 7
    assert attribute(orb, atts[2], observations=atts[:6]).reason == "duplicate"
    stranger = _track(other, network, 1)[0].with_id(99)
    res = attribute(orb, stranger, observations=atts[:6])
    assert not res.accepted and res.reason == "gate"
    assert mahalanobis(orb, [stranger])[0] > 5


def test_propagate_orbit_consistent(objects, network):
    atts = _track(objects[0], network, 5)
    orb = differential_correction(_prelim(objects[0], atts), atts, CFG)
    later = propagate_orbit(orb, orb.epoch + 7.0)
    assert np.allclose(later.state, SecularModel().states(orb.state, orb.epoch, [orb.epoch + 7.0])[0, 0])
    assert np.allclose(later.covariance, later.covariance.T)
    assert np.trace(later.covariance[:3, :3]) > np.trace(orb.covariance[:3, :3])


def test_pair_linkage_to_orbit(objects, network):
    obj = objects[1]
    atts = _track(obj, network, 2)
    cands = link_j2(*atts)
    pre = estimate_from_candidate(cands[0], "P")
    assert pre.status == "preliminary" and pre.trails == (0, 1)
    fit = differential_correction(pre, atts, CFG)
    assert fit.converged and fit.status == "pair"


class NumericalObject:
    """Truth integrated with the J2 force model, for the numerical fit model."""

    def __init__(self, obj):
        self.id, self.diameter, self.albedo = obj.id, obj.diameter, obj.albedo
        self.epoch, self.x0 = obj.elements.epoch, obj.state_at(obj.elements.epoch)

    def state_at(self, t):
        from debriscat.propagation import propagate_states
        t = np.asarray(t, dtype=float)
        return propagate_states(self.x0, np.atleast_1d((t - self.epoch) * DAY))[0].reshape(t.shape + (6,))


@pytest.mark.slow
def test_numerical_model_fit(objects, network):
    obj = NumericalObject(objects[0])
    atts = _track(objects[0], network, 4, days=2.0)
    atts = [make_attributable(obj, a.station, a.epoch, 0.4).with_id(a.trail_id) for a in atts]
    x = obj.state_at(atts[0].epoch) + np.array([0.1, 0, 0, 0, 1e-4, 0])
    fit = differential_correction(OrbitEstimate("N", atts[0].epoch, x, np.eye(6)), atts, CFG, NumericalModel())
    assert fit.converged and fit_is_good(fit, CFG)
    assert np.linalg.norm(fit.state[:3] - obj.state_at(fit.epoch)[:3]) < 1e-3


def test_model_selection():
    assert isinstance(get_model(None), SecularModel)
    assert isinstance(get_model("numerical"), NumericalModel)
    with pytest.raises(ValueError):
        get_model("sgp4")


def test_canonical_trails_and_status():
    assert canonical_trails([3, 1, 2, 3]) == (1, 2, 3)
    assert canonical_trails((2, 3, 1)) == canonical_trails((1, 3, 2))
    assert [CFG.status_for(n) for n in (2, 4, 5, 9, 10)] == ["pair", "pair", "reliable", "reliable", "numbered"]
    assert CFG.status_for(12, fitted=False) == "preliminary"


def test_management_rules(objects, network):
    obj = objects[0]
    atts = _track(obj, network, 6)
    store = {a.trail_id: a for a in atts}
    full = differential_correction(_prelim(obj, atts), atts, CFG)

    def corr(ids):
        sub = [store[i] for i in ids]
        return Correlation(ids, differential_correction(_prelim(obj, sub), sub, CFG))

    a, b = corr((0, 1, 2, 3)), corr((3, 4, 5))
    out = manage_correlations([a, corr((3, 2, 1, 0)), corr((0, 1)), b], store, CFG)
    # duplicates collapse, the subset is dropped, the discordant overlap merges
    assert [c.trails for c in out] == [(0, 1, 2, 3, 4, 5)]
    assert out[0].orbit.status == "reliable"
    assert "merge" in out[0].provenance
    same = propagate_orbit(full, out[0].orbit.epoch)
    assert np.allclose(out[0].orbit.state, same.state, atol=1e-4)


def test_catalog_round_trip(objects, network):
    atts = _track(objects[0], network, 5)
    orb = differential_correction(_prelim(objects[0], atts), atts, CFG)
    text = format_catalog([orb])
    back = parse_catalog(text)[0]
    assert format_catalog([back]) == text
    assert back.trails == orb.trails and back.status == orb.status
    assert np.allclose(back.state, orb.state, rtol=1e-11)
    with pytest.raises(ValueError, match=":2:"):
        parse_catalog(text + "{not json}\n")


@pytest.fixture(scope="module")
def small_center(network):
    pop = random_population(5, 31)
    res = run_survey(pop, network, (0.0, 4.0), 3)
    dc = DataCenter(CFG)
    for d in range(4):
        dc.ingest([a for a in res.attributables if d <= a.epoch < d + 1], label=d)
    return res, dc


def test_data_center_small_campaign(small_center):
    res, dc = small_center
    truth = dict(enumerate(res.truth))
    assert dc.check_op_order()
    assert dc.catalog(), "no orbit with 3 trails after 4 days"
    for c in dc.correlations:
        if len(c.trails) >= 4:
            assert len({truth[t] for t in c.trails}) == 1
    ids = [c.orbit.id for c in dc.correlations]
    assert len(ids) == len(set(ids))
    all_trails = [t for c in dc.correlations for t in c.trails]
    assert len(all_trails) == len(set(all_trails))


def test_data_center_rejects_bad_batches(small_center):
    res, _ = small_center
    dc = DataCenter(CFG)
    with pytest.raises(ValueError, match="trail ids"):
        dc.ingest([replace(res.attributables[0], trail_id=None)])
    dc.ingest(res.attributables[:3])
    with pytest.raises(ValueError, match="duplicate"):
        dc.ingest(res.attributables[:1])


def test_op_order_check_detects_violation():
    dc = DataCenter(CFG)
    dc.oplog = [(0, "ingest"), (0, "linkage"), (0, "attribution"), (0, "management")]
    assert not dc.check_op_order()
