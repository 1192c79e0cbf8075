import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from betamix.beta import (
    LINKS,
    BetaParams,
    DomainError,
    Link,
    dlog_density,
    link_apply,
    link_invert,
    log_density,
    logpdf,
    moments,
)
from oracles import lgamma_logpdf

unit = st.floats(0.001, 0.999)
disp = st.floats(0.1, 1e4)


def test_uniform_case_is_exactly_zero():
    assert log_density(0.3, BetaParams(0.5, 2.0)) == 0.0


def test_hand_computed_value():
    assert log_density(0.5, BetaParams(0.5, 4.0)) == pytest.approx(math.log(1.5), abs=1e-14)


@given(unit, unit, disp)
def test_reflection_symmetry(y, mu, phi):
    a = log_density(y, BetaParams(mu, phi))
    b = log_density(1 - y, BetaParams(1 - mu, phi))
    assert a == pytest.approx(b, rel=1e-10, abs=1e-9)


@given(unit, unit, disp)
def test_matches_lgamma_formula(y, mu, phi):
    assert log_density(y, BetaParams(mu, phi)) == pytest.approx(
        lgamma_logpdf(y, mu, phi), rel=1e-12, abs=1e-9
    )


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.2, 1.5, float("nan"), float("inf")])
def test_rejects_mu_on_or_outside_boundary(bad):
    with pytest.raises(DomainError):
        BetaParams(bad, 1.0)


@pytest.mark.parametrize("bad", [0.0, -1.0, float("nan"), float("inf")])
def test_rejects_bad_phi(bad):
    with pytest.raises(DomainError):
        BetaParams(0.5, bad)


@pytest.mark.parametrize("y", [0.0, 1.0, 1.2, float("nan")])
def test_rejects_response_outside_support(y):
    with pytest.raises(DomainError):
        log_density(y, BetaParams(0.5, 2.0))


def test_shapes_positive():
    a, b = BetaParams(0.2, 3.0).shapes
    assert a == pytest.approx(0.6) and b == pytest.approx(2.4)


def test_log_density_finite_at_large_dispersion():
    assert math.isfinite(log_density(0.4, BetaParams(0.4, 5e4)))
    assert math.isfinite(log_density(0.999, BetaParams(0.001, 1e5)))


@pytest.mark.parametrize("mu,phi,var", [(0.5, 1.0, 0.125), (0.5, 3.0, 0.0625)])
def test_moments_examples(mu, phi, var):
    m, v = moments(BetaParams(mu, phi))
    assert m == mu and v == pytest.approx(var, abs=1e-15)


def test_variance_decreases_in_phi():
    vs = [moments(BetaParams(0.3, phi))[1] for phi in (0.5, 1, 5, 50, 500)]
    assert all(a > b for a, b in zip(vs, vs[1:]))
    assert all(0 < v < 0.25 for v in vs)


def _half_integral(mu, phi, n=100_000):
    # integrate over (0, 1/2] in s = log y; dense near the right end
    s = np.unique(np.r_[np.linspace(-700.0, -10.0, n // 5), np.linspace(-10.0, math.log(0.5), n - n // 5)])
    f = np.exp(logpdf(np.exp(s), mu, phi) + s)
    return np.trapezoid(f, s)


@pytest.mark.parametrize("mu", [0.1, 0.3, 0.5, 0.7, 0.9])
@pytest.mark.parametrize("phi", [0.5, 5.0, 50.0, 500.0])
def test_density_integrates_to_one(mu, phi):
    # upper half by reflection: f(y; mu) = f(1 - y; 1 - mu)
    total = _half_integral(mu, phi) + _half_integral(1 - mu, phi)
    assert total == pytest.approx(1.0, abs=1e-5)


@pytest.mark.parametrize("mu,phi", [(0.3, 5.0), (0.5, 50.0), (0.8, 20.0)])
def test_numeric_moments(mu, phi):
    y = np.linspace(0, 1, 10**6 + 1)[1:-1]
    f = np.exp(logpdf(y, mu, phi))
    m = np.trapezoid(y * f, y)
    v = np.trapezoid((y - m) ** 2 * f, y)
    em, ev = moments(BetaParams(mu, phi))
    assert m == pytest.approx(em, abs=1e-4)
    assert v == pytest.approx(ev, abs=1e-4)


# --- derivatives -------------------------------------------------------------


def test_score_zero_at_symmetric_point():
    d1, d2 = dlog_density(0.5, BetaParams(0.5, 4.0))
    assert d1 == pytest.approx(0.0, abs=1e-13)
    assert d2 < 0


@settings(max_examples=200)
@given(st.floats(0.02, 0.98), st.floats(0.05, 0.95), st.floats(0.5, 500.0))
def test_derivatives_match_finite_differences(y, mu, phi):
    h = 1e-6
    f = lambda m: log_density(y, BetaParams(m, phi))
    d1, d2 = dlog_density(y, BetaParams(mu, phi))
    fd1 = (f(mu + h) - f(mu - h)) / (2 * h)
    g = lambda m: dlog_density(y, BetaParams(m, phi))[0]
    fd2 = (g(mu + h) - g(mu - h)) / (2 * h)
    assert d1 == pytest.approx(fd1, rel=1e-5, abs=1e-5 * max(1.0, phi))
    assert d2 == pytest.approx(fd2, rel=1e-5, abs=1e-5 * max(1.0, phi))


@pytest.mark.parametrize("y,phi", [(0.2, 3.0), (0.7, 40.0), (0.95, 8.0)])
def test_curvature_negative_at_score_root(y, phi):
    from scipy.optimize import brentq

    root = brentq(lambda m: dlog_density(y, BetaParams(m, phi))[0], 1e-6, 1 - 1e-6)
    assert dlog_density(y, BetaParams(root, phi))[1] < 0


# --- links -------------------------------------------------------------------


def test_logit_identity_cases():
    assert link_apply("logit", 0.5) == 0.0
    assert link_invert("logit", 0.0) == 0.5


def test_logit_inverse_value():
    assert link_invert("logit", 1.15) == pytest.approx(0.7595, abs=5e-4)


@pytest.mark.parametrize("tag", LINKS)
@pytest.mark.parametrize("mu", [1e-6, 0.01, 0.5, 0.99, 1 - 1e-6])
def test_round_trip(tag, mu):
    assert link_invert(tag, link_apply(tag, mu)) == pytest.approx(mu, abs=1e-12)


@pytest.mark.parametrize("tag", LINKS)
def test_links_strictly_increasing(tag):
    mu = np.linspace(0.001, 0.999, 999)
    eta = Link(tag).apply(mu)
    assert np.all(np.diff(eta) > 0)


@pytest.mark.parametrize("tag", LINKS)
def test_inverse_clamped(tag):
    lo, hi = Link(tag).inverse(np.array([-1e6, 1e6]))
    assert lo >= 1e-12 and hi <= 1 - 1e-12


@pytest.mark.parametrize("tag", LINKS)
@pytest.mark.parametrize("eta", [-2.0, -0.3, 0.0, 0.8, 2.5])
def test_inverse_derivatives(tag, eta):
    link = Link(tag)
    h = 1e-5
    d1, d2 = link.inverse_derivs(np.array([eta]))
    f1 = (link.inverse(eta + h) - link.inverse(eta - h)) / (2 * h)
    f2 = (link.inverse(eta + h) - 2 * link.inverse(eta) + link.inverse(eta - h)) / h**2
    assert d1[0] == pytest.approx(f1, rel=1e-7)
    assert d2[0] == pytest.approx(f2, rel=1e-3, abs=1e-5)


@pytest.mark.parametrize("mu", [0.0, 1.0, -1.0, float("nan")])
def test_link_apply_domain(mu):
    with pytest.raises(DomainError):
        link_apply("logit", mu)


def test_unknown_link():
    with pytest.raises(ValueError):
        Link("identity")


def test_invert_rejects_non_finite():
    with pytest.raises(DomainError):
        link_invert("logit", float("nan"))
