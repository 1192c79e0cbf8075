"""Beta distribution in the mean/dispersion parametrization and link functions.

A response ``Y ~ B(mu, phi)`` has shape parameters ``a = mu * phi`` and
``b = (1 - mu) * phi``, so that ``E(Y) = mu`` and
``V(Y) = mu * (1 - mu) / (1 + phi)``.  Dispersions of order 1e5 are routine
for fitted models, and there the textbook ``gammaln`` expression loses about
ten digits to cancellation.  :func:`logpdf` instead splits each log-gamma
into its Stirling part and a small remainder, so the large terms cancel
analytically and what is left is a pair of binomial-type deviances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

MU_CLAMP = 1e-12

LINKS = ("logit", "probit", "cloglog", "cauchit")


class DomainError(ValueError):
    """Argument outside the support of the beta model."""


@dataclass(frozen=True)
class BetaParams:
    mu: float
    phi: float

    def __post_init__(self) -> None:
        mu, phi = float(self.mu), float(self.phi)
        if not (math.isfinite(mu) and 0.0 < mu < 1.0):
            raise DomainError(f"mu must lie strictly inside (0, 1), got {self.mu!r}")
        if not (math.isfinite(phi) and phi > 0.0):
            raise DomainError(f"phi must be finite and positive, got {self.phi!r}")

    @property
    def shapes(self) -> tuple[float, float]:
        return self.mu * self.phi, (1.0 - self.mu) * self.phi


def _check_y(y: float) -> float:
    y = float(y)
    if not (math.isfinite(y) and 0.0 < y < 1.0):
        raise DomainError(f"y must lie strictly inside (0, 1), got {y!r}")
    return y


_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
# Bernoulli-number coefficients of the Stirling remainder in 1/x
_STIRLING = (1 / 12, -1 / 360, 1 / 1260, -1 / 1680, 1 / 1188)


def stirling_remainder(x):
    """``gammaln(x) - ((x - 1/2) log x - x + log(2 pi) / 2)`` without cancellation."""
    x = np.asarray(x, dtype=float)
    big = x >= 15.0
    xb = np.where(big, x, 15.0)
    inv2 = 1.0 / (xb * xb)
    series = 0.0
    for c in reversed(_STIRLING):
        series = series * inv2 + c
    series = series / xb
    xs = np.where(big, 1.0, x)
    with np.errstate(divide="ignore", invalid="ignore"):
        direct = special.gammaln(xs) - ((xs - 0.5) * np.log(xs) - xs + _HALF_LOG_2PI)
    return np.where(big, series, direct)


def deviance_term(x, m):
    """``x log(x / m) + m - x`` for ``x, m > 0``, accurate when ``x ~ m``."""
    x = np.asarray(x, dtype=float)
    m = np.asarray(m, dtype=float)
    d = x - m
    near = np.abs(d) < 0.1 * (x + m)
    # series in v = (x - m) / (x + m): 2x * sum_j v^(2j+1) / (2j+1) - d
    v = np.where(near, d / (x + m), 0.0)
    v2 = v * v
    s = d * v
    term = 2.0 * x * v
    for j in range(1, 200):
        term = term * v2
        s_new = s + term / (2 * j + 1)
        if np.array_equal(s_new, s):
            break
        s = s_new
    with np.errstate(divide="ignore", invalid="ignore"):
        far = x * np.log(x / m) + m - x
    return np.where(near, s, far)


def _logpdf_direct(y, a, b, phi):
    return (
        special.gammaln(phi)
        - special.gammaln(a)
        - special.gammaln(b)
        + (a - 1.0) * np.log(y)
        + (b - 1.0) * np.log1p(-y)
    )


def logpdf(y, mu, phi):
    """Vectorised log density, no argument checking.

    Small dispersions (``phi < 15``, where nothing large cancels) use the
    plain log-gamma expression; larger ones the Stirling split.
    """
    a = mu * phi
    b = phi - a
    small = np.asarray(phi) < 15.0
    if np.all(small):
        return _logpdf_direct(y, a, b, phi)
    split = (
        -deviance_term(a, phi * y)
        - deviance_term(b, phi * (1.0 - y))
        + 0.5 * (np.log(a) + np.log(b) - np.log(phi))
        - _HALF_LOG_2PI
        - np.log(y)
        - np.log1p(-y)
        + stirling_remainder(phi)
        - stirling_remainder(a)
        - stirling_remainder(b)
    )
    if not np.any(small):
        return split
    return np.where(small, _logpdf_direct(y, a, b, phi), split)


def dlogpdf_dmu(y, mu, phi):
    """First and second derivatives of the log density with respect to ``mu``."""
    a = mu * phi
    b = phi - a
    d1 = phi * (np.log(y) - np.log1p(-y) - special.digamma(a) + special.digamma(b))
    d2 = -(phi**2) * (special.polygamma(1, a) + special.polygamma(1, b))
    return d1, d2


def log_density(y: float, p: BetaParams) -> float:
    """Log density of ``y`` under ``B(p.mu, p.phi)``.

    Raises
    ------
    DomainError
        If ``y`` is not strictly inside (0, 1).
    """
    y = _check_y(y)
    return float(logpdf(y, p.mu, p.phi))


def moments(p: BetaParams) -> tuple[float, float]:
    return p.mu, p.mu * (1.0 - p.mu) / (1.0 + p.phi)


def dlog_density(y: float, p: BetaParams) -> tuple[float, float]:
    y = _check_y(y)
    d1, d2 = dlogpdf_dmu(y, p.mu, p.phi)
    return float(d1), float(d2)


@dataclass(frozen=True)
class Link:
    """Link function ``g: (0, 1) -> R`` with inverse and inverse derivatives."""

    tag: str = "logit"

    def __post_init__(self) -> None:
        if self.tag not in LINKS:
            raise ValueError(f"unknown link {self.tag!r}; expected one of {LINKS}")

    def apply(self, mu):
        mu = np.asarray(mu, dtype=float)
        if np.any(~np.isfinite(mu)) or np.any((mu <= 0.0) | (mu >= 1.0)):
            raise DomainError("link argument must lie strictly inside (0, 1)")
        if self.tag == "logit":
            out = special.logit(mu)
        elif self.tag == "probit":
            out = special.ndtri(mu)
        elif self.tag == "cloglog":
            out = np.log(-np.log1p(-mu))
        else:
            out = np.tan(np.pi * (mu - 0.5))
        return out[()] if out.ndim == 0 else out

    def inverse(self, eta):
        """Inverse link clamped to ``[1e-12, 1 - 1e-12]``."""
        eta = np.asarray(eta, dtype=float)
        if self.tag == "logit":
            mu = special.expit(eta)
        elif self.tag == "probit":
            mu = special.ndtr(eta)
        elif self.tag == "cloglog":
            with np.errstate(over="ignore"):
                mu = -np.expm1(-np.exp(eta))
        else:
            mu = 0.5 + np.arctan(eta) / np.pi
        mu = np.clip(mu, MU_CLAMP, 1.0 - MU_CLAMP)
        return mu[()] if mu.ndim == 0 else mu

    def inverse_derivs(self, eta, mu=None):
        """``(dmu/deta, d2mu/deta2)`` evaluated at ``eta``."""
        eta = np.asarray(eta, dtype=float)
        if self.tag == "logit":
            if mu is None:
                mu = self.inverse(eta)
            d1 = mu * (1.0 - mu)
            d2 = d1 * (1.0 - 2.0 * mu)
        elif self.tag == "probit":
            d1 = np.exp(-0.5 * eta**2) / math.sqrt(2.0 * math.pi)
            d2 = -eta * d1
        elif self.tag == "cloglog":
            e = np.exp(np.minimum(eta, 700.0))
            d1 = np.exp(eta - e)
            d2 = d1 * (1.0 - e)
        else:
            d1 = 1.0 / (np.pi * (1.0 + eta**2))
            d2 = -2.0 * eta * np.pi * d1**2
        return d1, d2


def link_apply(link: Link | str, mu: float) -> float:
    return float(_as_link(link).apply(mu))


def link_invert(link: Link | str, eta: float) -> float:
    eta = float(eta)
    if not math.isfinite(eta):
        raise DomainError(f"linear predictor must be finite, got {eta!r}")
    return float(_as_link(link).inverse(eta))


def _as_link(link: Link | str) -> Link:
    return link if isinstance(link, Link) else Link(link)
