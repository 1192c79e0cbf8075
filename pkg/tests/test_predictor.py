import dataclasses
import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import expit

from betamix.model import INTERCEPT, Dataset, ModelSpec, ParamVector, RandomEffects
from betamix.predictor import (
    Scenario,
    percent_difference,
    predict_random_effects,
    predict_scenario,
    scenario_report,
    write_effects_csv,
    write_scenarios_csv,
)
from cases import desk_case
from oracles import mode_1d


def _with_theta(fit, theta):
    return dataclasses.replace(fit, theta_hat=theta)


def _with_tau2(fit, tau2):
    t = fit.theta_hat
    return _with_theta(fit, ParamVector(t.beta, t.log_phi, [-math.log(tau2)]))


def test_symmetric_group_has_zero_effect(iqvt_fit):
    spec = ModelSpec((INTERCEPT,), RandomEffects("intercept"))
    data = Dataset(np.array([0.3, 0.7]), np.ones((2, 1)), (INTERCEPT,), np.array(["g", "g"]))
    f = dataclasses.replace(iqvt_fit, spec=spec, theta_hat=ParamVector([0.0], math.log(20.0), [0.0]))
    (pred,) = predict_random_effects(f, data)
    assert abs(pred.b_hat[0]) < 1e-10
    np.testing.assert_allclose(pred.fitted, 0.5, atol=1e-10)


@pytest.mark.parametrize("seed", range(6))
def test_mode_matches_grid_search(seed, iqvt_fit):
    data, spec, theta, eta = desk_case(seed)
    (pred,) = predict_random_effects(_with_theta(iqvt_fit, theta), data)
    ref = mode_1d(data.y, eta, theta.phi, theta.report(spec)["tau2"])
    assert pred.b_hat[0] == pytest.approx(ref, abs=1e-5)
    assert pred.curvature[0, 0] > 0


def test_shrinkage(iqvt_fit, iqvt_data):
    fitted = predict_random_effects(iqvt_fit, iqvt_data)
    free = predict_random_effects(_with_tau2(iqvt_fit, 1e-8), iqvt_data)
    for a, b in zip(fitted, free):
        assert abs(a.b_hat[0]) <= abs(b.b_hat[0]) + 1e-12
        assert np.sign(a.b_hat[0]) == np.sign(b.b_hat[0])
    tight = predict_random_effects(_with_tau2(iqvt_fit, 1e12), iqvt_data)
    assert max(abs(p.b_hat[0]) for p in tight) < 1e-6


def test_effects_track_truth(iqvt_fit, iqvt_data, iqvt_effects):
    preds = predict_random_effects(iqvt_fit, iqvt_data)
    b_hat = np.array([p.b_hat[0] for p in preds])
    true = np.array([iqvt_effects[p.group][0] for p in preds])
    assert stats.spearmanr(b_hat, true).statistic > 0.8


def test_fitted_values(iqvt_fit, iqvt_data):
    preds = predict_random_effects(iqvt_fit, iqvt_data)
    for p in preds:
        eta = iqvt_data.X[p.records] @ iqvt_fit.theta_hat.beta + p.b_hat[0]
        np.testing.assert_allclose(p.fitted, expit(eta), rtol=1e-12)
        assert np.all((p.fitted > 0) & (p.fitted < 1))
    assert sorted(np.concatenate([p.records for p in preds])) == list(range(len(iqvt_data)))


def test_spec_mismatch(iqvt_fit, iqvt_data):
    with pytest.raises(ValueError):
        predict_random_effects(iqvt_fit, iqvt_data, ModelSpec(iqvt_fit.spec.covariates))


# --- scenarios -----------------------------------------------------------------------------


def test_location_contrasts():
    # published plant-level coefficients: intercept 1.15, reservoir 0.24, downstream 0.15
    assert percent_difference([1.15, 0.24], [1, 1], [1, 0]) == pytest.approx(5.39, abs=0.15)
    assert percent_difference([1.15, 0.15], [1, 1], [1, 0]) == pytest.approx(3.55, abs=0.3)


def test_zero_contrast_and_identity():
    assert percent_difference([0.3, 0.0], [1, 1], [1, 0]) == 0.0
    assert percent_difference([0.3, 0.8], [1, 0.5], [1, 0.5]) == 0.0


def test_monotone_in_contrast():
    vals = [percent_difference([0.5, c], [1, 1], [1, 0]) for c in np.linspace(-1, 1, 21)]
    assert np.all(np.diff(vals) > 0)


def test_sign_antisymmetry():
    beta = [0.2, 0.6]
    up = percent_difference(beta, [1, 1], [1, 0])
    down = percent_difference(beta, [1, 0], [1, 1])
    assert up > 0 > down
    # relative changes invert multiplicatively
    assert (1 + up / 100) * (1 + down / 100) == pytest.approx(1.0)


def test_predict_scenario_forms(iqvt_fit):
    beta = iqvt_fit.theta_hat.beta
    x = [1, 0, 1, 0.3]
    base = predict_scenario(beta, x)
    assert base == pytest.approx(expit(np.dot(x, beta)))
    assert predict_scenario(iqvt_fit, x) == base
    s = Scenario("s", {"small": 1, "income": 0.3})
    assert predict_scenario(iqvt_fit, s) == base
    assert predict_scenario(iqvt_fit, s, b=[0.2]) == pytest.approx(expit(np.dot(x, beta) + 0.2))
    assert predict_scenario(beta, x, b=[0.2], z=[1.0]) == pytest.approx(expit(np.dot(x, beta) + 0.2))
    assert 0 < predict_scenario(beta, [1, 0, 0, 50]) < 1
    assert predict_scenario(beta, x, link="probit") != base
    with pytest.raises(ValueError):
        predict_scenario(beta, [1, 0])
    with pytest.raises(ValueError):
        predict_scenario(beta, x, b=[0.1])
    with pytest.raises(ValueError):
        predict_scenario(iqvt_fit, x, b=[0.1, 0.2])
    with pytest.raises(ValueError):
        predict_scenario(iqvt_fit, Scenario("bad", {"colour": 1}))


def test_percent_difference_accepts_scenarios(iqvt_fit):
    s, l = Scenario("small", {"small": 1}), Scenario("large", {})
    beta = iqvt_fit.theta_hat.beta
    assert percent_difference(iqvt_fit, s, l) == pytest.approx(
        percent_difference(beta, [1, 0, 1, 0], [1, 0, 0, 0])
    )


def test_scenario_report_and_exports(tmp_path, iqvt_fit, iqvt_data):
    preds = predict_random_effects(iqvt_fit, iqvt_data)
    scen = [Scenario("large", {}), Scenario("small", {"small": 1})]
    rows = scenario_report(iqvt_fit, scen, preds)
    assert len(rows) == 2 * (1 + len(preds))
    pop = [r for r in rows if r.group == "(population)"]
    assert [r.percent_vs_population for r in pop] == [0.0, 0.0]
    for r in rows:
        assert r.mu_population == next(p.mu for p in pop if p.scenario == r.scenario)
    write_effects_csv(preds, tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "group,record,b1,fitted"
    assert len(lines) == 1 + len(iqvt_data)
    write_scenarios_csv(rows, tmp_path / "s.csv")
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 1 + len(rows)
