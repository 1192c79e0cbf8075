"""Independent reference computations used by the tests.

Nothing here calls into the package's numerical code: densities come from
``scipy.stats.beta`` or ``math.lgamma`` and integrals from brute-force
trapezoid sums.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import optimize, stats
from scipy.special import expit


def lgamma_logpdf(y: float, mu: float, phi: float) -> float:
    a, b = mu * phi, (1.0 - mu) * phi
    return (
        math.lgamma(phi) - math.lgamma(a) - math.lgamma(b)
        + (a - 1.0) * math.log(y) + (b - 1.0) * math.log1p(-y)
    )


def group_h(b, y, eta_fixed, phi, tau2):
    """Joint log density of one scalar random intercept and a group's responses."""
    b = np.atleast_1d(np.asarray(b, dtype=float))
    mu = expit(eta_fixed[None, :] + b[:, None])
    cond = stats.beta.logpdf(y[None, :], mu * phi, (1.0 - mu) * phi).sum(axis=1)
    return cond + stats.norm.logpdf(b, scale=1.0 / math.sqrt(tau2))


def mode_1d(y, eta_fixed, phi, tau2, lo=-10.0, hi=10.0):
    """Bounded scalar search for the random-intercept mode."""
    res = optimize.minimize_scalar(
        lambda b: -group_h(b, y, eta_fixed, phi, tau2)[0],
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": 1e-12, "maxiter": 2000},
    )
    return float(res.x)


def trapezoid_marginal(y, eta_fixed, phi, tau2, n=10**6, width=10.0):
    """log of the integral of exp(h) over mode +/- width posterior sd."""
    m = mode_1d(y, eta_fixed, phi, tau2)
    e = 1e-4
    h0, hp, hm = group_h([m, m + e, m - e], y, eta_fixed, phi, tau2)
    sd = 1.0 / math.sqrt(max(-(hp - 2 * h0 + hm) / e**2, 1e-12))
    grid = np.linspace(m - width * sd, m + width * sd, n)
    vals = np.concatenate([group_h(c, y, eta_fixed, phi, tau2) for c in np.array_split(grid, 20)])
    top = vals.max()
    return float(top + math.log(np.trapezoid(np.exp(vals - top), grid)))


def fixed_effects_mle(y, X):
    """Plain beta regression (logit link) by Nelder-Mead then BFGS polish."""

    def nll(t):
        mu = expit(X @ t[:-1])
        phi = math.exp(t[-1])
        return -stats.beta.logpdf(y, mu * phi, (1.0 - mu) * phi).sum()

    x0 = np.r_[np.zeros(X.shape[1]), math.log(10.0)]
    res = optimize.minimize(nll, x0, method="Nelder-Mead",
                            options={"maxiter": 20000, "xatol": 1e-10, "fatol": 1e-12})
    res = optimize.minimize(nll, res.x, method="BFGS", options={"gtol": 1e-9})
    return res.x, -float(res.fun)


def mp_logpdf(y: float, mu: float, phi: float, digits: int = 40) -> float:
    """Log-gamma formula in 40-digit arithmetic, rounded once at the end."""
    import mpmath

    with mpmath.workdps(digits):
        y, mu, phi = mpmath.mpf(y), mpmath.mpf(mu), mpmath.mpf(phi)
        a = mu * phi
        b = phi - a
        val = (
            mpmath.loggamma(phi) - mpmath.loggamma(a) - mpmath.loggamma(b)
            + (a - 1) * mpmath.log(y) + (b - 1) * mpmath.log1p(-y)
        )
        return float(val)
