import math
import warnings

import numpy as np
import pytest
from scipy import stats

from betamix.dataclone import (
    CloneRun,
    Priors,
    clone_dataset,
    dc_estimates,
    dc_sample,
    diagnose,
    gelman_rubin,
    identifiability,
    write_chains_csv,
    write_diagnostics_csv,
)
from betamix.estimator import fit
from betamix.marginal import marginal_loglik
from betamix.model import INTERCEPT, ModelSpec, RandomEffects
from betamix.simulate import SimDesign, iqvt_truth, simulate


@pytest.fixture(scope="module")
def small():
    spec = ModelSpec((INTERCEPT, "income"), RandomEffects("intercept"))
    _, truth = iqvt_truth(4)
    from betamix.model import ParamVector

    theta = ParamVector([0.4, 0.47], truth.log_phi, truth.cov_raw)
    data, _ = simulate(SimDesign("custom", seed=5, spec=spec, theta=theta,
                                 template=simulate(SimDesign("iqvt", seed=5, n_units=60, n_groups=6))[0]))
    return data, spec


# --- cloning -------------------------------------------------------------------------


def test_clone_dataset(iqvt_data):
    assert clone_dataset(iqvt_data, 1) is iqvt_data
    c = clone_dataset(iqvt_data, 3)
    assert len(c) == 3 * len(iqvt_data)
    assert c.n_groups == 3 * iqvt_data.n_groups
    with pytest.raises(ValueError):
        clone_dataset(iqvt_data, 0)
    with pytest.raises(ValueError):
        clone_dataset(iqvt_data, 2.5)


def test_cloned_likelihood_is_k_fold(iqvt_data):
    spec, theta = iqvt_truth(4)
    one = marginal_loglik(iqvt_data, spec, theta)
    assert marginal_loglik(clone_dataset(iqvt_data, 4), spec, theta) == pytest.approx(4 * one, rel=1e-12)


# --- priors ------------------------------------------------------------------------------


def test_prior_density_against_scipy():
    spec = ModelSpec((INTERCEPT,), RandomEffects("intercept_slope", slope=INTERCEPT))
    pri = Priors(beta_precision=0.01, phi_shape=2.0, phi_rate=0.1, tau2_shape=0.5, tau2_rate=0.2)
    flat = np.array([0.7, math.log(30.0), -math.log(4.0), -math.log(9.0), math.atanh(0.3)])
    ref = (
        stats.norm.logpdf(0.7, scale=10.0)
        + stats.gamma.logpdf(30.0, 2.0, scale=10.0) + math.log(30.0)
        + stats.gamma.logpdf(4.0, 0.5, scale=5.0) + math.log(4.0)
        + stats.gamma.logpdf(9.0, 0.5, scale=5.0) + math.log(9.0)
        + stats.uniform.logpdf(0.3, -1, 2) + math.log(1 - 0.3**2)
    )
    assert pri.log_density(spec, flat) == pytest.approx(ref, abs=1e-12)


def test_prior_draws_have_prior_moments():
    spec = ModelSpec((INTERCEPT,), RandomEffects("intercept"))
    pri = Priors(phi_shape=3.0, phi_rate=0.5)
    rng = np.random.default_rng(0)
    draws = np.array([pri.draw(spec, rng) for _ in range(4000)])
    assert np.exp(draws[:, 1]).mean() == pytest.approx(6.0, rel=0.05)
    assert draws[:, 0].std() == pytest.approx(math.sqrt(1000), rel=0.05)


# --- R-hat ---------------------------------------------------------------------------------


def test_gelman_rubin():
    rng = np.random.default_rng(1)
    mixed = rng.normal(size=(4, 2000, 2))
    assert np.all(np.abs(gelman_rubin(mixed) - 1) < 0.01)
    stuck = mixed + np.arange(4)[:, None, None] * 3.0
    assert np.all(gelman_rubin(stuck) > 1.5)
    assert np.isnan(gelman_rubin(mixed[:1])).all()
    assert gelman_rubin(np.ones((3, 10, 1)))[0] == 1.0


# --- synthetic runs ------------------------------------------------------------------------


def _run(K, sd, rng, d=2, n=4000):
    raw = rng.normal(size=(2, n, d)) * np.asarray(sd)
    return CloneRun(K, tuple(f"p{j}" for j in range(d)), tuple(f"p{j}" for j in range(d)),
                    raw, raw, {}, 0, None)


def test_dc_estimates_scale_by_k():
    rng = np.random.default_rng(2)
    run = _run(16, 0.25, rng)
    est, se = dc_estimates(run)
    assert se["p0"] == pytest.approx(1.0, rel=0.03)
    assert abs(est["p0"]) < 0.02
    const = CloneRun(4, ("a",), ("a",), np.ones((2, 50, 1)), np.ones((2, 50, 1)), {}, 0, None)
    assert dc_estimates(const)[1]["a"] == 0.0


def test_diagnose_identified_and_not():
    rng = np.random.default_rng(3)
    Ks = [1, 5, 10, 20]
    good = diagnose({k: _run(k, 1 / math.sqrt(k), rng) for k in Ks})
    assert good.identifiable
    assert all(abs(s + 1) < 0.1 for s in good.slopes.values())
    # second coordinate keeps its spread
    bad = diagnose({k: _run(k, [1 / math.sqrt(k), 1.0], rng) for k in Ks})
    assert not bad.identifiable
    assert abs(bad.slopes["p1"]) < 0.1
    with pytest.raises(ValueError):
        diagnose({5: _run(5, 1.0, rng)})


# --- the sampler -----------------------------------------------------------------------------


def test_seed_required_and_reproducible(small):
    data, spec = small
    with pytest.raises(ValueError):
        dc_sample(data, spec, 2, iters=50, burnin=10)
    with pytest.raises(ValueError):
        dc_sample(data, spec, 2, iters=50, burnin=50, seed=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = dc_sample(data, spec, 2, chains=2, iters=120, burnin=40, seed=11)
        b = dc_sample(data, spec, 2, chains=2, iters=120, burnin=40, seed=11)
        c = dc_sample(data, spec, 2, chains=2, iters=120, burnin=40, seed=12)
    assert np.array_equal(a.raw_draws, b.raw_draws)
    assert not np.array_equal(a.raw_draws, c.raw_draws)
    assert a.draws.shape == (2, 80, spec.n_params)


@pytest.fixture(scope="module")
def small_runs(small):
    data, spec = small
    return {k: dc_sample(data, spec, k, chains=3, iters=3000, burnin=1000, seed=20 + k) for k in (10, 20)}


def test_acceptance_rates_in_band(small_runs):
    for run in small_runs.values():
        for key, rate in run.acceptance.items():
            if key.startswith(("shift", "null")):
                continue
            assert 0.15 <= rate <= 0.5, (run.K, key, rate)


def test_standard_errors_stable_in_k(small_runs, small):
    data, spec = small
    ml = fit(data, spec)
    (e10, s10), (e20, s20) = (dc_estimates(small_runs[k]) for k in (10, 20))
    for n in spec.names:
        assert s20[n] == pytest.approx(s10[n], rel=0.2), n
        assert abs(e20[n] - ml.estimates[n]) < 0.5 * ml.std_errors[n], n
    assert all(r < 1.1 for r in small_runs[20].rhat.values())


def test_prior_washes_out(small):
    data, spec = small
    flat = Priors()
    vague = Priors(phi_shape=0.1, phi_rate=0.01, tau2_shape=0.1, tau2_rate=0.01)
    a = dc_sample(data, spec, 50, flat, chains=2, iters=2000, burnin=700, seed=3)
    b = dc_sample(data, spec, 50, vague, chains=2, iters=2000, burnin=700, seed=4)
    (ea, sa), (eb, sb) = dc_estimates(a), dc_estimates(b)
    for n in spec.names:
        combined = math.hypot(sa[n], sb[n])
        assert abs(ea[n] - eb[n]) < 0.5 * combined, n


def test_writers(tmp_path, small_runs):
    run = small_runs[10]
    write_chains_csv(run, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0].split(",") == ["chain", "iteration", *run.names]
    assert len(lines) == 1 + 3 * 2000
    assert lines[1].startswith("1,1001,")
    rng = np.random.default_rng(0)
    diag = diagnose({k: _run(k, 1 / math.sqrt(k), rng) for k in (1, 4)})
    write_diagnostics_csv(diag, tmp_path / "d.csv")
    rows = (tmp_path / "d.csv").read_text().splitlines()
    assert rows[0] == "K,parameter,scaled_variance,lambda_max"
    assert len(rows) == 1 + 2 * 2


def test_identifiability_schedule_checks(small):
    data, spec = small
    with pytest.raises(ValueError):
        identifiability(data, spec, K_list=[5, 10])
